"""Narrator backends: a deterministic rule-following mock and an HTTP client.

All backends speak text.  The pipeline parses whatever comes back into
clauses, so a real multimodal model can be dropped in behind the HTTP
contract without touching the loop.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
import urllib.error
import urllib.request
from typing import Protocol, Sequence

from ..errors import BackendError, ContractError, OrderingError
from ..heatmap import FieldDigest, RGBImage, region_from_parts, region_parts
from .evaluator import FEEDBACK_TYPES, Feedback, inject_defect
from .text import (
    HEDGED_CAUSAL,
    TENDENCY_WORDS,
    Clause,
    Narrative,
    VariableDescription,
    describe_digest,
    has_banned_causal,
    observation,
    order_clauses,
    parse_clause,
    parse_lines,
)

log = logging.getLogger(__name__)

DEFECT_KINDS = FEEDBACK_TYPES


class NarratorBackend(Protocol):
    def describe(self, variable: str, digest: FieldDigest | None, image: RGBImage | None) -> str: ...

    def integrate(self, previous: str, description: str, order: Sequence[str]) -> str: ...

    def refine(self, narrative: str, feedback: Feedback, order: Sequence[str]) -> str: ...

    def edit(self, previous: str, digests: Sequence[FieldDigest], images: Sequence[RGBImage] | None,
             order: Sequence[str]) -> str: ...

    def single_pass(self, digests: Sequence[FieldDigest], images: Sequence[RGBImage] | None,
                    order: Sequence[str]) -> str: ...


def _unit(*parts: str) -> float:
    h = hashlib.sha256("\x1f".join(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") / 2.0**64


def interaction_hypothesis(clauses: Sequence[Clause]) -> Clause | None:
    """Hedged z/wind hypothesis when the wind rotation centre sits on the z extreme.

    For a rotational wind around an isolated blob the zonal wind peaks in the
    blob's column and the meridional wind in its row, so the rotation centre
    is the (row band of v, column band of u) region.
    """
    first = {}
    for c in clauses:
        if c.is_assertion and c.variable not in first:
            first[c.variable] = c
    if not {"z", "u", "v"} <= first.keys():
        return None
    centre = region_from_parts(region_parts(first["v"].region)[0], region_parts(first["u"].region)[1])
    z = first["z"]
    if centre != z.region:
        return None
    extreme = "maximum" if z.value >= 0 else "minimum"
    return parse_clause(f"v: circulation may be organized around the z {extreme} near {centre}")


class MockBackend:
    """Deterministic narrator that follows the template rules exactly.

    ``defect_rate`` makes the integrator (and, doubled, the single-pass
    narrator) introduce one pseudo-random defect per call with that
    probability, keyed on a hash of the inputs; it stays a pure function.
    """

    def __init__(self, defect_rate: float = 0.0, salt: str = ""):
        if not 0.0 <= defect_rate <= 1.0:
            raise ContractError("defect_rate must lie in [0, 1]")
        self.defect_rate = defect_rate
        self.salt = salt
        self.calls = 0

    def describe(self, variable, digest, image=None) -> str:
        self.calls += 1
        if digest is None:
            raise BackendError("mock describer needs a field digest")
        if digest.variable != variable:
            raise ContractError(f"digest is for {digest.variable!r}, not {variable!r}")
        return describe_digest(digest).text

    def _maybe_defect(self, S: Narrative, d: VariableDescription, key: str, rate: float, order) -> Narrative:
        if rate <= 0 or _unit(self.salt, "defect", key) >= rate:
            return S
        kind = DEFECT_KINDS[int(_unit(self.salt, "kind", key) * len(DEFECT_KINDS))]
        return inject_defect(S, d, kind, order)

    def integrate(self, previous, description, order) -> str:
        self.calls += 1
        prev = Narrative.from_text(previous)
        new = parse_lines(description)
        if not new:
            raise BackendError("integrate got an empty description")
        var = new[0].variable
        rank = {v: i for i, v in enumerate(order)}
        if var not in rank:
            raise OrderingError(f"variable {var!r} not in order {list(order)}")
        done = {c.variable for c in prev.clauses if c.kind == "observation"}
        if var in done or any(rank.get(v, -1) > rank[var] for v in done):
            raise OrderingError(f"variable {var!r} integrated out of order after {sorted(done)}")
        clauses = list(prev.clauses) + new
        hyp = interaction_hypothesis(clauses)
        if hyp is not None:
            clauses.append(hyp)
        S = Narrative(order_clauses(clauses, order), prev.version + 1)
        d = VariableDescription(rank[var], var, tuple(new))
        return self._maybe_defect(S, d, previous + "\x1e" + description, self.defect_rate, order).text

    def refine(self, narrative, feedback, order) -> str:
        self.calls += 1
        return apply_refinement(Narrative.from_text(narrative), feedback, order).text

    def edit(self, previous, digests, images=None, order=()) -> str:
        self.calls += 1
        return edit_narrative(Narrative.from_text(previous), digests, order).text

    def single_pass(self, digests, images=None, order=()) -> str:
        self.calls += 1
        clauses = [describe_digest(d) for d in digests]
        hyp = interaction_hypothesis(clauses)
        if hyp is not None:
            clauses.append(hyp)
        S = Narrative(order_clauses(clauses, order))
        rate = min(1.0, 2.0 * self.defect_rate)
        key = "|".join(json.dumps(d.to_json(), sort_keys=True) for d in digests)
        for i, c in enumerate(clauses[: len(digests)]):
            d = VariableDescription(i, c.variable, (c,))
            S = self._maybe_defect(S, d, f"{key}#{i}", rate, order)
        return S.text


def apply_refinement(S: Narrative, fb: Feedback, order: Sequence[str]) -> Narrative:
    """Apply the single rule matching ``fb.type``; other clauses stay byte-identical."""
    var = fb.description.variable
    ref = fb.description.reference
    clauses = list(S.clauses)
    if fb.type == "missing":
        clauses += list(fb.description.clauses)
    elif fb.type == "distorted":
        for k, c in enumerate(clauses):
            if c.variable == var and c.is_assertion:
                clauses[k] = ref
                break
    elif fb.type == "contradictory":
        clauses = [c for c in clauses
                   if not (c.variable == var and c.is_assertion and c.region == ref.region
                           and (c.value >= 0) != (ref.value >= 0))]
    elif fb.type == "overstated-causality":
        out = []
        for c in clauses:
            if c.variable == var and has_banned_causal(c.text):
                text = c.text
                for banned, hedged in HEDGED_CAUSAL.items():
                    text = text.replace(banned, hedged)
                c = parse_clause(text)
            out.append(c)
        clauses = out
    else:
        raise ContractError(f"unknown feedback type {fb.type!r}")
    return S.with_clauses(clauses, order, (fb.description.hash(),))


def tendency_between(previous: float, current: float, lower: float = 0.92, upper: float = 1.04) -> str:
    """Trend word from the magnitude ratio of a variable's dominant extreme.

    The steady band is asymmetric because diffusion alone shrinks peaks by a
    few percent per step.
    """
    p, c = abs(previous), abs(current)
    if p == 0:
        return "strengthening" if c > 0 else "steady"
    ratio = c / p
    if ratio > upper:
        return "strengthening"
    if ratio < lower:
        return "weakening"
    return "steady"


def edit_narrative(prev: Narrative, digests: Sequence[FieldDigest], order: Sequence[str]) -> Narrative:
    """Minimal evidence-grounded edit of ``prev`` against current digests.

    The trend word is shared across variables and re-estimated only from the
    lead variable (first in ``order``) when its magnitude changes; otherwise
    the previous trend is kept.  Clauses whose region, value and trend are
    unchanged are kept verbatim, so unchanged fields give back ``prev``.
    """
    by_var = {d.variable: d for d in digests}
    lead = next((v for v in order if v in by_var), digests[0].variable if digests else None)
    old_lead = next((c for c in prev.for_variable(lead) if c.is_assertion), None) if lead else None
    trend: str | None = None
    if lead is not None:
        d = by_var[lead]
        fresh = describe_digest(d)
        if d.tendency in TENDENCY_WORDS:
            trend = d.tendency
        elif old_lead is not None:
            if old_lead.value != fresh.value:
                trend = tendency_between(old_lead.value, fresh.value)
            elif old_lead.trend in TENDENCY_WORDS:
                trend = old_lead.trend
    clauses: list[Clause] = []
    for d in digests:
        fresh = describe_digest(d)
        old = next((c for c in prev.for_variable(d.variable) if c.is_assertion), None)
        if old is None:
            clauses.append(fresh)
        elif trend is None:
            clauses.append(old if (old.region, old.value) == (fresh.region, fresh.value) else fresh)
        elif (old.region, old.value, old.trend) == (fresh.region, fresh.value, trend):
            clauses.append(old)
        else:
            clauses.append(observation(d.variable, trend, fresh.value, fresh.region))
    hyp = interaction_hypothesis(clauses)
    if hyp is not None:
        clauses.append(hyp)
    new = order_clauses(clauses, order)
    if tuple(c.text for c in new) == tuple(c.text for c in prev.clauses):
        return prev
    return Narrative(new, prev.version + 1, prev.provenance)


class HttpBackend:
    """POSTs ``{role, template_id, images, context}`` JSON and reads ``{text}``.

    Temperature is fixed at 0 by the templates; failed calls are retried with
    exponential backoff.
    """

    TEMPLATES = {
        "describe": "agcd.describe.v1",
        "integrate": "agcd.integrate.v1",
        "refine": "agcd.refine.v1",
        "edit": "agcd.edit.v1",
        "single_pass": "agcd.single.v1",
    }

    def __init__(self, url: str, retries: int = 3, backoff: float = 0.5, timeout: float = 30.0):
        self.url = url
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.calls = 0

    def _post(self, role: str, images: Sequence[RGBImage] | None, context: dict) -> str:
        body = json.dumps({
            "role": role,
            "template_id": self.TEMPLATES[role],
            "images": [base64.b64encode(im.ppm_bytes()).decode("ascii") for im in images or ()],
            "context": json.dumps(context, sort_keys=True),
        }).encode("utf-8")
        last = "no attempt"
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self.calls += 1
            req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                text = payload.get("text") if isinstance(payload, dict) else None
                if not isinstance(text, str):
                    raise BackendError("response lacks a 'text' string")
                return text
            except urllib.error.HTTPError as exc:
                last = f"HTTP {exc.code}"
            except (urllib.error.URLError, OSError, ValueError, BackendError) as exc:
                last = str(exc)
            log.warning("backend %s call failed (attempt %d): %s", role, attempt + 1, last)
        raise BackendError(f"{role} call to {self.url} failed: {last}", retries=self.retries)

    def describe(self, variable, digest, image=None) -> str:
        ctx = {"variable": variable, "digest": digest.to_json() if digest else None}
        return self._post("describe", [image] if image is not None else None, ctx)

    def integrate(self, previous, description, order) -> str:
        return self._post("integrate", None, {"previous": previous, "description": description, "order": list(order)})

    def refine(self, narrative, feedback, order) -> str:
        ctx = {"narrative": narrative, "type": feedback.type, "index": feedback.index,
               "description": feedback.description.text, "order": list(order)}
        return self._post("refine", None, ctx)

    def edit(self, previous, digests, images=None, order=()) -> str:
        ctx = {"previous": previous, "digests": [d.to_json() for d in digests], "order": list(order)}
        return self._post("edit", images, ctx)

    def single_pass(self, digests, images=None, order=()) -> str:
        return self._post("single_pass", images, {"digests": [d.to_json() for d in digests], "order": list(order)})

