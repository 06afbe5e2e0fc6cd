"""Offline narration of whole datasets into the cache."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

from ..fieldgrid import AtmosphericState, Dataset, OracleAnnotation
from ..heatmap import ColormapSpec, digest_state, render_field
from .cache import CacheRecord, NarrationCache
from .pipeline import PIPELINE_VERSION, VariableInput, run_pipeline

log = logging.getLogger(__name__)


def state_inputs(
    state: AtmosphericState,
    variables: Sequence[str],
    cmap: ColormapSpec | None = None,
    tendency: str | None = None,
) -> list[VariableInput]:
    """Digests (and rendered images when ``cmap`` is given) for each variable."""
    digests = digest_state(state.fields, variables, tendency)
    images = [render_field(state.fields[v], cmap, v) for v in variables] if cmap is not None else [None] * len(variables)
    return [VariableInput(v, d, im) for v, d, im in zip(variables, digests, images)]


@dataclass
class NarrationSummary:
    passed: int = 0
    failed: int = 0
    fallback: int = 0
    cached: int = 0
    rounds: int = 0

    def line(self) -> str:
        return (f"PASS={self.passed} FAIL={self.failed} fallback={self.fallback} "
                f"cached={self.cached} rounds={self.rounds}")


def narrate_dataset(
    dataset: Dataset,
    backend,
    cache: NarrationCache,
    rounds: int = 2,
    strategy: str = "full",
    cmap: ColormapSpec | None = None,
    use_oracle: bool = True,
    variables: Sequence[str] | None = None,
    steps: Sequence[int] | None = None,
) -> NarrationSummary:
    """Narrate every (sample, step) not already cached.

    With ``use_oracle`` the annotation's growth regime is handed to the
    describers as the trend word, which is how matched text carries
    information beyond the current fields.  ``variables`` restricts which
    describers run (the rest of the state is not narrated).
    """
    variables = list(variables) if variables is not None else list(dataset.spec.variables)
    summary = NarrationSummary()
    for i, seq in enumerate(dataset.sequences):
        anns: list[OracleAnnotation] = dataset.annotations[i] if i < len(dataset.annotations) else []
        for k, state in enumerate(seq):
            if steps is not None and k not in steps:
                continue
            key = (state.sample_id, state.time_index)
            if key in cache:
                summary.cached += 1
                continue
            tendency = anns[k].regime if use_oracle and k < len(anns) else None
            if not variables:
                text, descs, history, used, ok, fb = "", [], [], 0, True, False
            else:
                res = run_pipeline(backend, state_inputs(state, variables, cmap, tendency), rounds, strategy)
                text, descs = res.narrative.text, [d.text for d in res.descriptions]
                history, used, ok, fb = res.log, res.rounds_used, res.passed, res.fallback
            cache.put(CacheRecord(state.sample_id, state.time_index, text, descs, history, used, PIPELINE_VERSION, fb))
            summary.passed += ok
            summary.failed += not ok
            summary.fallback += fb
            summary.rounds += used
    return summary
