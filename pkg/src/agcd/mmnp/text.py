"""Structured narrative text: clauses, per-variable descriptions and narratives.

Every narrative is plain text with one clause per line.  Observation clauses
follow the template ``<var>: <trend> <maximum|minimum> <+v.v> near <region>``;
hypothesis clauses are any clause carrying a hedge token.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from ..errors import ContractError
from ..heatmap import REGIONS, FieldDigest

HEDGES = ("may", "could", "possibly", "appears")
BANNED_CAUSAL = ("causes", "forces", "will produce")
HEDGED_CAUSAL = {"causes": "may cause", "forces": "may force", "will produce": "may produce"}
INTENSITY_WORDS = ("strong", "moderate", "weak")
TENDENCY_WORDS = ("strengthening", "steady", "weakening")

_CLAUSE_RE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*:\s*(.*?)\s*$")
_NUM_RE = re.compile(r"(?<![\w.])[+\-−]?\d+(?:\.\d+)?")
# hyphenated labels first so "north-west" is not read as "north"
_REGION_RE = re.compile(
    r"(?<![\w-])(" + "|".join(sorted(REGIONS, key=len, reverse=True)) + r")(?![\w-])"
)
_WORD_RE = re.compile(r"[a-z]+")


def intensity_word(value: float) -> str:
    a = abs(value)
    if a >= 2.0:
        return "strong"
    if a >= 1.0:
        return "moderate"
    return "weak"


def format_value(value: float) -> str:
    return f"{value:+.1f}"


@dataclass(frozen=True)
class Clause:
    variable: str
    region: str | None
    value: float | None
    trend: str | None
    kind: str  # "observation" | "hypothesis"
    text: str

    def __post_init__(self):
        if self.kind == "hypothesis" and not has_hedge(self.text):
            raise ContractError(f"hypothesis clause without hedge token: {self.text!r}")

    @property
    def is_assertion(self) -> bool:
        """An observation that states a located, signed intensity."""
        return self.kind == "observation" and self.value is not None and self.region is not None


def has_hedge(text: str) -> bool:
    words = set(_WORD_RE.findall(text.lower()))
    return any(h in words for h in HEDGES)


def has_banned_causal(text: str) -> bool:
    low = " " + " ".join(_WORD_RE.findall(text.lower())) + " "
    return any(f" {b} " in low for b in BANNED_CAUSAL)


def parse_clause(text: str) -> Clause:
    m = _CLAUSE_RE.match(text)
    if not m:
        raise ContractError(f"clause lacks a '<variable>:' prefix: {text!r}")
    var, body = m.group(1), m.group(2)
    region_m = _REGION_RE.search(body.lower())
    num_m = _NUM_RE.search(body)
    value = float(num_m.group(0).replace("−", "-")) if num_m else None
    first = body.split()[0].lower() if body.split() else None
    trend = first if first in INTENSITY_WORDS + TENDENCY_WORDS else None
    kind = "hypothesis" if has_hedge(body) else "observation"
    return Clause(var, region_m.group(1) if region_m else None, value, trend, kind, text.strip())


def observation(variable: str, trend: str, value: float, region: str) -> Clause:
    extreme = "maximum" if value >= 0 else "minimum"
    return parse_clause(f"{variable}: {trend} {extreme} {format_value(value)} near {region}")


def describe_digest(d: FieldDigest) -> Clause:
    """Template clause for the dominant extreme of a digest."""
    if abs(d.min_value) > abs(d.max_value):
        value, region = d.min_value, d.min_region
    else:
        value, region = d.max_value, d.region
    trend = d.tendency if d.tendency in TENDENCY_WORDS else intensity_word(value)
    return observation(d.variable, trend, value, region)


def parse_lines(text: str) -> list[Clause]:
    return [parse_clause(line) for line in text.splitlines() if line.strip()]


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class VariableDescription:
    index: int
    variable: str
    clauses: tuple[Clause, ...]
    source_hash: str = ""

    def __post_init__(self):
        if not self.clauses:
            raise ContractError(f"description of {self.variable!r} is empty")
        for c in self.clauses:
            if c.variable != self.variable:
                raise ContractError(f"clause {c.text!r} does not reference {self.variable!r}")

    @property
    def text(self) -> str:
        return "\n".join(c.text for c in self.clauses)

    @property
    def reference(self) -> Clause | None:
        for c in self.clauses:
            if c.is_assertion:
                return c
        return None

    def hash(self) -> str:
        return text_hash(f"{self.index}:{self.text}")


@dataclass(frozen=True)
class Narrative:
    clauses: tuple[Clause, ...] = ()
    version: int = 0
    provenance: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return "\n".join(c.text for c in self.clauses)

    def for_variable(self, variable: str) -> list[Clause]:
        return [c for c in self.clauses if c.variable == variable]

    def variables(self) -> list[str]:
        seen: list[str] = []
        for c in self.clauses:
            if c.variable not in seen:
                seen.append(c.variable)
        return seen

    def with_clauses(self, clauses: Iterable[Clause], order: Sequence[str], extra_provenance: Sequence[str] = ()) -> "Narrative":
        return Narrative(order_clauses(clauses, order), self.version + 1, self.provenance + tuple(extra_provenance))

    @classmethod
    def from_text(cls, text: str, order: Sequence[str] | None = None, version: int = 0) -> "Narrative":
        clauses = parse_lines(text)
        if order is not None:
            clauses = order_clauses(clauses, order)
        return cls(tuple(clauses), version)


def order_clauses(clauses: Iterable[Clause], order: Sequence[str]) -> tuple[Clause, ...]:
    """Stable sort by fixed variable order; drops duplicate raw texts (first wins)."""
    rank = {v: i for i, v in enumerate(order)}
    seen: set[str] = set()
    unique = []
    for c in clauses:
        if c.text in seen:
            continue
        seen.add(c.text)
        unique.append(c)
    return tuple(sorted(unique, key=lambda c: rank.get(c.variable, len(rank))))
