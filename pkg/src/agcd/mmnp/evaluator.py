"""Rule-based evidence-grounded evaluator and defect injection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..errors import ContractError
from ..heatmap import REGIONS
from .text import (
    BANNED_CAUSAL,
    Narrative,
    VariableDescription,
    format_value,
    has_banned_causal,
    parse_clause,
)

FEEDBACK_TYPES = ("missing", "distorted", "contradictory", "overstated-causality")


@dataclass(frozen=True)
class Feedback:
    type: str
    index: int
    description: VariableDescription
    narrative: Narrative

    def __post_init__(self):
        if self.type not in FEEDBACK_TYPES:
            raise ContractError(f"unknown feedback type {self.type!r}")


@dataclass(frozen=True)
class EvaluatorVerdict:
    flag: str  # "PASS" | "FAIL"
    score: float
    feedback: Feedback | None = None

    @property
    def passed(self) -> bool:
        return self.flag == "PASS"

    def log_entry(self) -> dict:
        entry = {"flag": self.flag, "score": self.score}
        if self.feedback is not None:
            entry["type"] = self.feedback.type
            entry["index"] = self.feedback.index
        return entry


def _opposite(a: float, b: float) -> bool:
    return (a >= 0) != (b >= 0)


def _coverage(S: Narrative, d: VariableDescription) -> bool:
    return any(c.is_assertion for c in S.for_variable(d.variable))


def _fidelity(S: Narrative, d: VariableDescription) -> bool:
    ref = d.reference
    first = next((c for c in S.for_variable(d.variable) if c.is_assertion), None)
    if ref is None or first is None:
        return first is None  # nothing to compare; coverage reports the gap
    return first.region == ref.region and first.value == ref.value and first.trend == ref.trend


def _consistent(S: Narrative, d: VariableDescription) -> bool:
    obs = [c for c in S.for_variable(d.variable) if c.is_assertion]
    for i, a in enumerate(obs):
        for b in obs[i + 1:]:
            if a.region == b.region and _opposite(a.value, b.value):
                return False
    return True


def _hedged(S: Narrative, d: VariableDescription) -> bool:
    return not any(has_banned_causal(c.text) for c in S.for_variable(d.variable))


_CHECKS = (
    ("missing", _coverage),
    ("distorted", _fidelity),
    ("contradictory", _consistent),
    ("overstated-causality", _hedged),
)


def evaluate(descriptions: Sequence[VariableDescription], S: Narrative) -> EvaluatorVerdict:
    """Run the four checks per variable; report the first failure in fixed order."""
    if not descriptions:
        raise ContractError("evaluate needs at least one description")
    total = passed = 0
    first: Feedback | None = None
    for kind, check in _CHECKS:
        for d in descriptions:
            total += 1
            if check(S, d):
                passed += 1
            elif first is None:
                first = Feedback(kind, d.index, d, S)
    score = passed / total
    if first is None:
        return EvaluatorVerdict("PASS", score)
    return EvaluatorVerdict("FAIL", score, first)


# ---------------------------------------------------------------------------
# defect injection (test fixtures and noisy mock narrators)


def _other_region(region: str) -> str:
    i = REGIONS.index(region)
    j = 8 - i
    return REGIONS[0] if j == i else REGIONS[j]


def inject_defect(S: Narrative, d: VariableDescription, kind: str, order: Sequence[str]) -> Narrative:
    """Return ``S`` with exactly one defect of ``kind`` affecting ``d.variable``."""
    var = d.variable
    clauses = list(S.clauses)
    target = next((k for k, c in enumerate(clauses) if c.variable == var and c.is_assertion), None)
    if kind == "missing":
        clauses = [c for c in clauses if not (c.variable == var and c.is_assertion)]
    elif kind == "distorted":
        if target is None:
            raise ContractError(f"no assertion for {var!r} to distort")
        c = clauses[target]
        clauses[target] = parse_clause(c.text.replace(f"near {c.region}", f"near {_other_region(c.region)}"))
    elif kind == "contradictory":
        if target is None:
            raise ContractError(f"no assertion for {var!r} to contradict")
        c = clauses[target]
        v = -c.value if c.value != 0 else -1.0
        extreme = "maximum" if v >= 0 else "minimum"
        clauses.insert(target + 1, parse_clause(f"{var}: {c.trend or 'moderate'} {extreme} {format_value(v)} near {c.region}"))
    elif kind == "overstated-causality":
        region = clauses[target].region if target is not None else "central"
        clauses.append(parse_clause(f"{var}: the pattern near {region} {BANNED_CAUSAL[0]} downstream warming"))
    else:
        raise ContractError(f"unknown defect kind {kind!r}")
    return S.with_clauses(clauses, order)


def stub_always_fail(scores: Sequence[float]):
    """Evaluator stub that fails every round with the given score sequence."""
    it = iter(scores)

    def _evaluate(descriptions, S):
        d = descriptions[0]
        return EvaluatorVerdict("FAIL", next(it), Feedback("missing", d.index, d, S))

    return _evaluate

