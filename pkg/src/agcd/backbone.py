"""Toy pre-norm Transformer forecaster: patch tokens, class token and a linear head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ShapeError
from .numcore import ParamStore, Var


@dataclass(frozen=True)
class BackboneConfig:
    H: int = 16
    W: int = 16
    n_vars: int = 4
    patch: int = 4
    d: int = 32
    heads: int = 4
    depth: int = 2
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ShapeError(f"d={self.d} not divisible by heads={self.heads}")
        if self.H % self.patch or self.W % self.patch:
            raise ShapeError(f"patch {self.patch} does not divide grid {self.H}x{self.W}")

    @property
    def n_patches(self) -> int:
        return (self.H // self.patch) * (self.W // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.n_vars


# ---------------------------------------------------------------------------
# patches


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """``(V, H, W)`` or ``(B, V, H, W)`` -> ``(N, V*p*p)`` / ``(B, N, V*p*p)``.

    Patches are row-major; inside a patch the layout is [variable][row][col].
    """
    x = np.asarray(x, dtype=nc.DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    B, V, H, W = x.shape
    if p <= 0 or H % p or W % p:
        raise ShapeError(f"patch size {p} does not divide grid {H}x{W}")
    out = x.reshape(B, V, H // p, p, W // p, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, (H // p) * (W // p), V * p * p)
    return out[0] if single else out


def unpatchify_array(t: np.ndarray, p: int, V: int, H: int, W: int) -> np.ndarray:
    single = t.ndim == 2
    if single:
        t = t[None]
    B = t.shape[0]
    out = t.reshape(B, H // p, W // p, V, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(B, V, H, W)
    return out[0] if single else out


def unpatchify(t, p: int, V: int, H: int, W: int) -> Var:
    """Differentiable inverse of :func:`patchify` for ``(B, N, V*p*p)`` tokens."""
    B = t.shape[0]
    t = nc.reshape(t, (B, H // p, W // p, V, p, p))
    t = nc.transpose(t, (0, 3, 1, 4, 2, 5))
    return nc.reshape(t, (B, V, H, W))


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def init_attention(store: ParamStore, prefix: str, d: int, rng, out_bias: bool = True) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", _uniform(rng, d, (d, d)))
    if out_bias:
        store.add(f"{prefix}.bo", _uniform(rng, d, (d,)))


def init_mlp(store: ParamStore, prefix: str, d_in: int, d_hidden: int, d_out: int, rng) -> None:
    store.add(f"{prefix}.w1", _uniform(rng, d_in, (d_in, d_hidden)))
    store.add(f"{prefix}.b1", _uniform(rng, d_in, (d_hidden,)))
    store.add(f"{prefix}.w2", _uniform(rng, d_hidden, (d_hidden, d_out)))
    store.add(f"{prefix}.b2", _uniform(rng, d_hidden, (d_out,)))


def init_backbone(store: ParamStore, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    d = cfg.d
    store.add("bb.patch.w", _uniform(rng, cfg.patch_dim, (cfg.patch_dim, d)))
    store.add("bb.patch.b", _uniform(rng, cfg.patch_dim, (d,)))
    store.add("bb.cls", 0.02 * rng.standard_normal((1, d)))
    store.add("bb.pos", 0.02 * rng.standard_normal((cfg.n_patches + 1, d)))
    for l in range(cfg.depth):
        pre = f"bb.blk{l}"
        store.add(f"{pre}.ln1.g", np.ones(d))
        store.add(f"{pre}.ln1.b", np.zeros(d))
        init_attention(store, f"{pre}.attn", d, rng)
        store.add(f"{pre}.ln2.g", np.ones(d))
        store.add(f"{pre}.ln2.b", np.zeros(d))
        init_mlp(store, f"{pre}.mlp", d, cfg.mlp_ratio * d, d, rng)


def init_baseline_head(store: ParamStore, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    store.add("head.w", _uniform(rng, cfg.d, (cfg.d, cfg.patch_dim)))
    store.add("head.b", _uniform(rng, cfg.d, (cfg.patch_dim,)))


# ---------------------------------------------------------------------------
# forward


def attention(params: ParamStore, prefix: str, q_in, kv_in, heads: int) -> Var:
    """Scaled dot-product multi-head attention with output projection."""
    B, Nq, d = q_in.shape
    Nk = kv_in.shape[1]
    dh = d // heads

    def split(x, n):
        return nc.transpose(nc.reshape(x, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split(nc.mm(q_in, params.var(f"{prefix}.wq")), Nq)
    k = split(nc.mm(kv_in, params.var(f"{prefix}.wk")), Nk)
    v = split(nc.mm(kv_in, params.var(f"{prefix}.wv")), Nk)
    att = nc.softmax(nc.scale(nc.mm(q, nc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh)))
    o = nc.reshape(nc.transpose(nc.mm(att, v), (0, 2, 1, 3)), (B, Nq, d))
    bias = params.var(f"{prefix}.bo") if f"{prefix}.bo" in params else None
    return nc.linear(o, params.var(f"{prefix}.wo"), bias)


def mlp(params: ParamStore, prefix: str, x) -> Var:
    h = nc.gelu(nc.linear(x, params.var(f"{prefix}.w1"), params.var(f"{prefix}.b1")))
    return nc.linear(h, params.var(f"{prefix}.w2"), params.var(f"{prefix}.b2"))


def encode(params: ParamStore, cfg: BackboneConfig, patches) -> tuple[Var, Var]:
    """Patch tokens ``(B, N, patch_dim)`` -> (P ``(B, N, d)``, C ``(B, 1, d)``)."""
    patches = patches if isinstance(patches, Var) else Var(patches)
    if patches.value.ndim != 3 or patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise ShapeError(f"encode: expected (B, {cfg.n_patches}, {cfg.patch_dim}), got {patches.shape}")
    B = patches.shape[0]
    x = nc.linear(patches, params.var("bb.patch.w"), params.var("bb.patch.b"))
    cls = nc.expand(params.var("bb.cls"), (B, 1, cfg.d))
    x = nc.add(nc.concat([cls, x], axis=1), params.var("bb.pos"))
    for l in range(cfg.depth):
        pre = f"bb.blk{l}"
        h = nc.layer_norm(x, params.var(f"{pre}.ln1.g"), params.var(f"{pre}.ln1.b"))
        x = nc.add(x, attention(params, f"{pre}.attn", h, h, cfg.heads))
        h = nc.layer_norm(x, params.var(f"{pre}.ln2.g"), params.var(f"{pre}.ln2.b"))
        x = nc.add(x, mlp(params, f"{pre}.mlp", h))
    C = nc.take(x, (slice(None), slice(0, 1)))
    P = nc.take(x, (slice(None), slice(1, None)))
    return P, C


def baseline_head(params: ParamStore, cfg: BackboneConfig, P) -> Var:
    """Per-token linear map to patch pixels, reassembled to ``(B, V, H, W)`` (normalized units)."""
    t = nc.linear(P, params.var("head.w"), params.var("head.b"))
    return unpatchify(t, cfg.patch, cfg.n_vars, cfg.H, cfg.W)
