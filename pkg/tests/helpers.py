"""Shared builders for narration tests."""

from __future__ import annotations

import numpy as np

from agcd.fieldgrid import GridSpec, gen_synthetic
from agcd.mmnp import MockBackend, Narrative, VariableInput, describe_variable, integrate, state_inputs

ORDER = ("z", "t", "u", "v")


def sample_inputs(n: int, seed: int = 7) -> list[list[VariableInput]]:
    ds = gen_synthetic(seed, n, GridSpec.regular(), 1)
    return [state_inputs(seq[0], ORDER, tendency=ann[0].regime) for seq, ann in zip(ds.sequences, ds.annotations)]


def clean_narrative(inputs: list[VariableInput]):
    """Defect-free narrative plus its descriptions, built step by step."""
    backend = MockBackend()
    descs = [describe_variable(backend, inp, i) for i, inp in enumerate(inputs)]
    S = Narrative()
    for d in descs:
        S = integrate(backend, S, d, ORDER)
    return S, descs


def gaussian(center, H=16, W=16, amp=1.0, sigma=2.0):
    r, c = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return amp * np.exp(-((r - center[0]) ** 2 + (c - center[1]) ** 2) / (2 * sigma**2))
