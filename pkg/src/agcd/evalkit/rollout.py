"""Strictly causal autoregressive rollout with narrative editing and an audit.

Every input a step reads is fetched through a :class:`RolloutContext`, which
records the identity of what was consumed.  The audit then checks that step
``k`` only touched the initial state, earlier predictions and earlier
narratives.  Identifiers are ``state:0``, ``pred:j``, ``narr:j`` and
``truth:j`` (the latter registered only so that leaks can be detected).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import AgcdError, ContractError, PipelineError
from ..fieldgrid import AtmosphericState
from ..heatmap import ColormapSpec
from ..mmnp.narrate import state_inputs
from ..mmnp.pipeline import edit_step
from ..mmnp.text import Narrative

log = logging.getLogger(__name__)

_ID_RE = re.compile(r"^(state|pred|narr|truth):(\d+)$")


@dataclass
class StepRecord:
    step: int
    purpose: str  # "predict" | "refresh"
    consumed: list[str] = field(default_factory=list)
    produced: str = ""


@dataclass
class RolloutTrace:
    initial: AtmosphericState
    predictions: list[AtmosphericState] = field(default_factory=list)
    narratives: list[Narrative] = field(default_factory=list)  # S^(0..K)
    provenance: list[StepRecord] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.predictions)

    def fingerprint(self) -> bytes:
        parts = [self.initial.sample_id.encode()]
        for p in self.predictions:
            parts.append(np.ascontiguousarray(np.stack([p.fields[v] for v in sorted(p.fields)]), dtype="<f8").tobytes())
        parts += [n.text.encode() for n in self.narratives]
        parts += [f"{r.step}|{r.purpose}|{','.join(r.consumed)}|{r.produced}".encode() for r in self.provenance]
        return b"\x00".join(parts)


class RolloutContext:
    """Registry of rollout artefacts that logs every read against the active step."""

    def __init__(self):
        self._items: dict[str, object] = {}
        self.records: list[StepRecord] = []
        self._active: StepRecord | None = None

    def register(self, ident: str, value) -> None:
        if not _ID_RE.match(ident):
            raise ContractError(f"malformed rollout identifier {ident!r}")
        self._items[ident] = value

    def begin(self, step: int, purpose: str) -> StepRecord:
        self._active = StepRecord(step, purpose)
        self.records.append(self._active)
        return self._active

    def fetch(self, ident: str):
        if self._active is None:
            raise ContractError("fetch outside of a rollout step")
        self._active.consumed.append(ident)
        return self._items[ident]


def _allowed(ident: str, step: int) -> bool:
    m = _ID_RE.match(ident)
    if m is None:
        return False
    kind, j = m.group(1), int(m.group(2))
    if kind == "state":
        return j == 0
    if kind in ("pred", "narr"):
        return j < step
    return False


def first_violation(trace: RolloutTrace) -> tuple[int, str] | None:
    """(step, identifier) of the earliest disallowed read, or None."""
    for rec in trace.provenance:
        for ident in rec.consumed:
            if not _allowed(ident, rec.step):
                return rec.step, ident
    return None


def audit_causality(trace: RolloutTrace) -> bool:
    bad = first_violation(trace)
    if bad is not None:
        log.warning("causality audit failed at step %d: consumed %s", *bad)
        return False
    return True


def _input_id(k: int) -> str:
    return "state:0" if k == 1 else f"pred:{k - 1}"


def rollout_many(
    model,
    editor,
    states0: Sequence[AtmosphericState],
    narratives0: Sequence[Narrative] | None,
    steps: int,
    truths: Sequence[Sequence[AtmosphericState]] | None = None,
    cmap: ColormapSpec | None = None,
) -> list[RolloutTrace]:
    """Batched rollout: one trace per initial state, predictions batched per step.

    Step ``k`` predicts from the step ``k-1`` state and ``S^(k-1)``; after
    the prediction the editor refreshes ``S^(k)`` from that prediction alone.
    ``truths`` (future states) are registered so that a dishonest model can
    be caught by the audit; an honest model never reads them.
    """
    if steps < 0:
        raise ContractError("steps must be >= 0")
    uses_text = getattr(model, "uses_text", True)
    n = len(states0)
    if narratives0 is None:
        narratives0 = [Narrative()] * n
    variables = tuple(model.variables)
    ctxs = [RolloutContext() for _ in range(n)]
    traces = [RolloutTrace(s, [], [S]) for s, S in zip(states0, narratives0)]
    for i, ctx in enumerate(ctxs):
        ctx.register("state:0", states0[i])
        ctx.register("narr:0", narratives0[i])
        for j, t in enumerate(truths[i] if truths is not None else (), start=1):
            ctx.register(f"truth:{j}", t)

    for k in range(1, steps + 1):
        # gather inputs through the contexts so every read is logged
        cur, texts = [], []
        for i, ctx in enumerate(ctxs):
            ctx.begin(k, "predict")
            cur.append(ctx.fetch(_input_id(k)))
            texts.append(ctx.fetch(f"narr:{k - 1}").text if uses_text else None)
        preds = model.predict_step(cur, texts, ctxs=ctxs, step=k)
        for i, ctx in enumerate(ctxs):
            ctx.register(f"pred:{k}", preds[i])
            traces[i].predictions.append(preds[i])
            # refresh the narrative for the next step from this prediction only
            ctx.begin(k + 1, "refresh")
            prev = ctx.fetch(f"narr:{k - 1}")
            state = ctx.fetch(f"pred:{k}")
            if uses_text:
                try:
                    S = edit_step(editor, prev, state_inputs(state, variables, cmap))
                except AgcdError as exc:
                    raise PipelineError(f"editor failed at step {k}: {exc}") from exc
            else:
                S = prev
            ctx.records[-1].produced = f"narr:{k}"
            ctx.register(f"narr:{k}", S)
            traces[i].narratives.append(S)
    for tr, ctx in zip(traces, ctxs):
        tr.provenance = ctx.records
    return traces


def rollout(model, editor, state0: AtmosphericState, narrative0: Narrative | None, steps: int,
            truths: Sequence[AtmosphericState] | None = None, cmap: ColormapSpec | None = None) -> RolloutTrace:
    return rollout_many(model, editor, [state0], [narrative0 or Narrative()], steps,
                        [truths] if truths is not None else None, cmap)[0]


class FutureLeakStub:
    """Fault injector: at ``leak_step`` it returns the true future state."""

    def __init__(self, model, leak_step: int):
        self.model = model
        self.leak_step = leak_step
        self.variables = model.variables
        self.uses_text = model.uses_text

    def predict_step(self, states, texts, ctxs=None, step=0):
        if step == self.leak_step and ctxs is not None:
            return [ctx.fetch(f"truth:{step}") for ctx in ctxs]
        return self.model.predict_step(states, texts, ctxs=ctxs, step=step)
