"""Forecaster wrapper (vision-only or text-guided) and the checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numcore as nc
from ..backbone import BackboneConfig, baseline_head, encode, init_backbone, init_baseline_head, patchify
from ..crid import CRIDConfig, crid_predict, init_crid
from ..errors import ConfigError, CorruptionError, FormatError, ShapeError
from ..fieldgrid import AtmosphericState, NormStats
from ..numcore import ParamStore, Var
from ..textenc import FrozenTextEncoder

VARIANTS = ("baseline", "agcd")
CKPT_MAGIC = "AGCD-CKPT"
CKPT_VERSION = "1"


@dataclass(frozen=True)
class ModelSpec:
    variant: str = "agcd"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    crid: CRIDConfig = field(default_factory=CRIDConfig)
    residual: bool = True  # forecast the increment over the input state

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def uses_text(self) -> bool:
        return self.variant == "agcd"

    def to_json(self) -> dict:
        crid = dataclasses.asdict(self.crid)
        crid["scales"] = list(crid["scales"])
        return {"variant": self.variant, "backbone": dataclasses.asdict(self.backbone), "crid": crid, "residual": self.residual}

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        crid = dict(d["crid"])
        crid["scales"] = tuple(crid["scales"])
        return cls(d["variant"], BackboneConfig(**d["backbone"]), CRIDConfig(**crid), bool(d.get("residual", True)))


class Forecaster:
    """Maps a state (plus narrative features for the text variant) to the next state."""

    def __init__(self, spec: ModelSpec, params: ParamStore, stats: NormStats, variables: Sequence[str]):
        self.spec = spec
        self.params = params
        self.stats = stats
        self.variables = tuple(variables)
        if len(self.variables) != spec.backbone.n_vars:
            raise ShapeError(f"{len(self.variables)} variables for a {spec.backbone.n_vars}-variable model")
        self.encoder = FrozenTextEncoder(spec.crid.d_t, spec.crid.max_tokens)
        self._mean = np.array([stats.mean[v] for v in self.variables])[:, None, None]
        self._std = np.array([max(stats.std[v], NormStats.STD_FLOOR) for v in self.variables])[:, None, None]

    @property
    def uses_text(self) -> bool:
        return self.spec.uses_text

    # -- array plumbing -------------------------------------------------
    def normalize(self, arr: np.ndarray) -> np.ndarray:
        return (arr - self._mean) / self._std

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        return arr * self._std + self._mean

    def text_features(self, texts: Sequence[str]) -> np.ndarray:
        return self.encoder.encode_batch(list(texts))

    def forward(self, x_norm: np.ndarray, text_feats: np.ndarray | None = None) -> Var:
        """Normalized ``(B, V, H, W)`` in, normalized forecast out (differentiable)."""
        b = self.spec.backbone
        patches = patchify(x_norm, b.patch)
        P, C = encode(self.params, b, patches)
        if self.spec.uses_text:
            if text_feats is None:
                raise ConfigError("text-guided variant needs narrative features")
            out = crid_predict(self.params, b, self.spec.crid, P, C, text_feats)
        else:
            out = baseline_head(self.params, b, P)
        return nc.add(out, x_norm) if self.spec.residual else out

    def predict_arrays(self, x: np.ndarray, texts: Sequence[str] | None = None, batch: int = 64) -> np.ndarray:
        """Physical-unit ``(B, V, H, W)`` in and out."""
        x = np.asarray(x, dtype=nc.DTYPE)
        out = np.empty_like(x)
        for lo in range(0, len(x), batch):
            feats = self.text_features(texts[lo:lo + batch]) if self.uses_text else None
            out[lo:lo + batch] = self.denormalize(self.forward(self.normalize(x[lo:lo + batch]), feats).value)
        return out

    def predict_step(self, states: Sequence[AtmosphericState], texts: Sequence[str | None] | None = None,
                     **_) -> list[AtmosphericState]:
        """Advance each state by one step (rollout interface)."""
        if not states:
            return []
        arr = np.stack([s.stack(self.variables) for s in states])
        txt = [t or "" for t in texts] if self.uses_text and texts is not None else None
        if self.uses_text and txt is None:
            txt = [""] * len(states)
        y = self.predict_arrays(arr, txt)
        return [AtmosphericState.from_stack(s.sample_id, s.time_index + 1, y[i], self.variables)
                for i, s in enumerate(states)]

    def predict_one(self, state: AtmosphericState, narrative: str | None = None) -> AtmosphericState:
        return self.predict_step([state], [narrative])[0]


def init_forecaster(spec: ModelSpec, stats: NormStats, variables: Sequence[str], seed: int) -> Forecaster:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_backbone(store, spec.backbone, rng)
    if spec.uses_text:
        init_crid(store, spec.backbone, spec.crid, rng)
    else:
        init_baseline_head(store, spec.backbone, rng)
    return Forecaster(spec, store, stats, variables)


# ---------------------------------------------------------------------------
# checkpoints: header line, JSON metadata line, raw little-endian float64 tensors


def save_checkpoint(path: str | Path, model: Forecaster) -> str:
    names = sorted(model.params.names())
    blobs = [np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names]
    digest = hashlib.sha256(b"".join(blobs)).hexdigest()
    meta = {
        "spec": model.spec.to_json(),
        "stats": model.stats.to_json(),
        "variables": list(model.variables),
        "tensors": [[n, list(model.params[n].shape), bool(model.params.entry(n).trainable)] for n in names],
        "sha256": digest,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode())
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for b in blobs:
            fh.write(b)
    return digest


def load_checkpoint(path: str | Path) -> Forecaster:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", "replace").split()
        if header != [CKPT_MAGIC, CKPT_VERSION]:
            raise FormatError(f"{path}: not an {CKPT_MAGIC} v{CKPT_VERSION} checkpoint")
        meta = json.loads(fh.readline())
        payload = fh.read()
    store = ParamStore()
    offset = 0
    for name, shape, trainable in meta["tensors"]:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if offset + n > len(payload):
            raise FormatError(f"{path}: truncated tensor {name!r}")
        store.add(name, np.frombuffer(payload[offset:offset + n], dtype="<f8").reshape(shape).astype(nc.DTYPE), trainable)
        offset += n
    if hashlib.sha256(payload[:offset]).hexdigest() != meta["sha256"]:
        raise CorruptionError(f"{path}: checkpoint content hash mismatch")
    return Forecaster(ModelSpec.from_json(meta["spec"]), store, NormStats.from_json(meta["stats"]), meta["variables"])
