"""Supervised one-step training with latitude-weighted MSE and Adam."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numcore as nc
from ..errors import ContractError, DataError, NotFoundError
from ..fieldgrid import Dataset, latitude_weights
from .model import Forecaster

log = logging.getLogger(__name__)

TEXT_MODES = ("matched", "shuffled", "empty")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 2e-3
    final_lr_fraction: float = 0.1  # cosine decay floor
    seed: int = 0


@dataclass
class PairSet:
    """One-step (input, target) pairs as physical-unit arrays."""

    x: np.ndarray  # (S, V, H, W)
    y: np.ndarray
    sample_ids: list[str]
    time_index: list[int]

    def __len__(self) -> int:
        return len(self.x)


def make_pairs(dataset: Dataset, lead: int = 1, first_only: bool = False) -> PairSet:
    """``first_only`` keeps just the pair starting at each sequence's first state."""
    vs = dataset.spec.variables
    if first_only:
        pairs = [(seq[0], seq[lead]) for seq in dataset.sequences if len(seq) > lead]
    else:
        pairs = dataset.pairs(lead)
    H, W = dataset.spec.shape
    if not pairs:
        empty = np.zeros((0, len(vs), H, W))
        return PairSet(empty, empty.copy(), [], [])
    x = np.stack([a.stack(vs) for a, _ in pairs])
    y = np.stack([b.stack(vs) for _, b in pairs])
    return PairSet(x, y, [a.sample_id for a, _ in pairs], [a.time_index for a, _ in pairs])


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random cyclic permutation (no fixed points) via Sattolo's shuffle."""
    if n < 2:
        raise ContractError("a derangement needs at least two items")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def narrative_texts(pairs: PairSet, cache, mode: str, seed: int = 0) -> list[str]:
    """Text assigned to each pair under the given control setting."""
    if mode not in TEXT_MODES:
        raise ContractError(f"unknown text mode {mode!r}")
    if mode == "empty":
        return [""] * len(pairs)
    texts = []
    for sid, k in zip(pairs.sample_ids, pairs.time_index):
        try:
            texts.append(cache.get(sid, k).narrative)
        except (NotFoundError, KeyError):
            raise DataError(f"no cached narrative for sample {sid!r} step {k}; run narration first") from None
    if mode == "shuffled":
        perm = derangement(len(texts), np.random.default_rng(seed))
        texts = [texts[j] for j in perm]
    return texts


def weighted_mse(pred, target: np.ndarray, weights: np.ndarray):
    """mean over all entries of w[row] * (pred - target)^2 (differentiable)."""
    err = nc.sub(pred, target)
    return nc.mean_all(nc.mul(nc.square(err), weights[:, None]))


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "loss"))
            for i, loss in enumerate(self.losses, start=1):
                w.writerow((i, repr(loss)))


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.steps <= 1:
        return cfg.lr
    frac = (step - 1) / (cfg.steps - 1)
    floor = cfg.final_lr_fraction
    return cfg.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * frac)))


def train(
    model: Forecaster,
    pairs: PairSet,
    texts: Sequence[str] | None,
    cfg: TrainConfig,
    weights: np.ndarray | None = None,
    loss_csv: str | Path | None = None,
) -> TrainResult:
    """Minimise latitude-weighted MSE in normalized units; deterministic given ``cfg.seed``."""
    if len(pairs) == 0:
        raise DataError("no training pairs")
    if model.uses_text and (texts is None or len(texts) != len(pairs)):
        raise DataError("text-guided training needs one narrative per pair")
    H = pairs.x.shape[-2]
    w = np.asarray(weights if weights is not None else np.ones(H), dtype=nc.DTYPE)
    xn = model.normalize(pairs.x)
    yn = model.normalize(pairs.y)
    feats = model.text_features(texts) if model.uses_text else None
    rng = np.random.default_rng(cfg.seed)
    state = nc.AdamState()
    result = TrainResult()
    n = len(pairs)
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch]
        cursor += cfg.batch
        with nc.Tape() as tape:
            pred = model.forward(xn[idx], feats[idx] if feats is not None else None)
            loss = weighted_mse(pred, yn[idx], w)
            tape.backward(loss)
        nc.adam_step(model.params, state, learning_rate(cfg, step))
        model.params.zero_grad()
        result.losses.append(float(loss.value))
        if step % 500 == 0:
            log.info("step %d loss %.5f", step, result.losses[-1])
    if loss_csv is not None:
        result.write_csv(loss_csv)
    return result


def default_weights(dataset: Dataset) -> np.ndarray:
    return latitude_weights(dataset.spec)
