"""Describe / integrate / evaluate / refine loop and the single-step rollout editor."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

from ..errors import AgcdError, BackendError, ContractError, PipelineError
from ..heatmap import FieldDigest, RGBImage
from .evaluator import EvaluatorVerdict, Feedback, evaluate
from .text import Narrative, VariableDescription, parse_lines

log = logging.getLogger(__name__)

PIPELINE_VERSION = "mmnp-1"
STRATEGIES = ("full", "no_evaluator", "single_agent")


@dataclass(frozen=True)
class VariableInput:
    variable: str
    digest: FieldDigest | None = None
    image: RGBImage | None = None


def describe_variable(backend, inp: VariableInput, index: int) -> VariableDescription:
    text = backend.describe(inp.variable, inp.digest, inp.image)
    if not text or not text.strip():
        raise BackendError(f"describer for {inp.variable!r} returned empty text")
    clauses = tuple(parse_lines(text))
    src = inp.digest.hash() if inp.digest is not None else ""
    return VariableDescription(index, inp.variable, clauses, src)


def integrate(backend, S_prev: Narrative, d: VariableDescription, order: Sequence[str]) -> Narrative:
    text = backend.integrate(S_prev.text, d.text, order)
    S = Narrative.from_text(text, order, S_prev.version + 1)
    return Narrative(S.clauses, S.version, S_prev.provenance + (d.hash(),))


def refine(backend, S: Narrative, feedback: Feedback, order: Sequence[str]) -> Narrative:
    if getattr(feedback, "type", None) not in ("missing", "distorted", "contradictory", "overstated-causality"):
        raise ContractError(f"unknown feedback type {getattr(feedback, 'type', None)!r}")
    text = backend.refine(S.text, feedback, order)
    out = Narrative.from_text(text, order, S.version + 1)
    return Narrative(out.clauses, out.version, S.provenance + (feedback.description.hash(),))


@dataclass
class PipelineResult:
    narrative: Narrative
    descriptions: list[VariableDescription]
    log: list[dict] = field(default_factory=list)
    rounds_used: int = 0
    passed: bool = True
    fallback: bool = False


def run_pipeline(
    backend,
    inputs: Sequence[VariableInput],
    rounds: int = 2,
    strategy: str = "full",
    evaluator: Callable[[Sequence[VariableDescription], Narrative], EvaluatorVerdict] = evaluate,
    max_workers: int | None = None,
) -> PipelineResult:
    """Narrate one multi-variable state.

    Describers fan out concurrently; integration consumes their outputs in
    the fixed variable order, so completion order never matters.  On FAIL the
    narrative is refined up to ``rounds`` times, then the best-scoring
    candidate (earliest on ties) is returned.
    """
    if rounds < 0:
        raise ContractError("rounds must be >= 0")
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    order = [inp.variable for inp in inputs]
    try:
        if strategy == "single_agent":
            text = backend.single_pass([i.digest for i in inputs], [i.image for i in inputs if i.image is not None], order)
            S = Narrative.from_text(text, order, 1)
            return PipelineResult(S, [], [{"round": 0, "flag": "SKIPPED"}], 0, True, False)

        with ThreadPoolExecutor(max_workers=max_workers or max(1, len(inputs))) as pool:
            futures = [pool.submit(describe_variable, backend, inp, i) for i, inp in enumerate(inputs)]
            descriptions = [f.result() for f in futures]

        S = Narrative()
        for d in descriptions:
            S = integrate(backend, S, d, order)

        if strategy == "no_evaluator":
            return PipelineResult(S, descriptions, [{"round": 0, "flag": "SKIPPED"}], 0, True, False)

        candidates: list[tuple[float, Narrative]] = []
        history: list[dict] = []
        for r in range(rounds + 1):
            verdict = evaluator(descriptions, S)
            history.append({"round": r, **verdict.log_entry()})
            if verdict.passed:
                return PipelineResult(S, descriptions, history, r, True, False)
            candidates.append((verdict.score, S))
            if r == rounds:
                break
            S = refine(backend, S, verdict.feedback, order)
    except AgcdError as exc:
        if isinstance(exc, (BackendError, PipelineError)):
            raise PipelineError(f"narration pipeline failed: {exc}") from exc
        raise
    best_score = max(score for score, _ in candidates)
    best = next(S for score, S in candidates if score == best_score)
    log.info("narrative still failing after %d rounds; falling back to score %.3f", rounds, best_score)
    return PipelineResult(best, descriptions, history, rounds, False, True)


def edit_step(backend, S_prev: Narrative, inputs: Sequence[VariableInput]) -> Narrative:
    """Rollout editor: revise ``S_prev`` against the current predicted fields only."""
    order = [i.variable for i in inputs]
    images = [i.image for i in inputs if i.image is not None] or None
    try:
        text = backend.edit(S_prev.text, [i.digest for i in inputs], images, order)
    except AgcdError as exc:
        raise PipelineError(f"rollout editor failed: {exc}") from exc
    if text == S_prev.text:
        return S_prev
    new = Narrative.from_text(text, order, S_prev.version + 1)
    return Narrative(new.clauses, new.version, S_prev.provenance)
