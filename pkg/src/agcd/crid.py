"""Text-guided plug-in decoder: state-conditioned gating of frozen text tokens
followed by region tokens, pooled memory and cross-attention from patch tokens.

All functions take batched tensors: ``P (B, N, d)``, ``C (B, 1, d)`` and
``T (B, N_t, d_t)``.  Ablation switches live on :class:`CRIDConfig`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .backbone import BackboneConfig, _uniform, attention, init_mlp, mlp, unpatchify
from .errors import ConfigError, ShapeError
from .numcore import ParamStore, Var

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CRIDConfig:
    d_t: int = 48
    max_tokens: int = 64
    f_hidden: int = 32
    scales: tuple[int, ...] = (2, 4)
    memory: int = 8
    beta_h: float | None = None  # None -> 1/sqrt(d)
    pool_projections: bool = True
    heads: int = 4
    mlp_ratio: int = 4
    identity_decoder: bool = False
    use_region: bool = True
    use_hopfield: bool = True
    use_cmg: bool = True
    gate_rescale: bool = True  # multiply T~ by N_t * d so uniform gates leave U unchanged

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(sorted(int(s) for s in self.scales)))
        if self.memory <= 0:
            raise ConfigError("memory token count must be positive")

    def inverse_temperature(self, d: int) -> float:
        return 1.0 / math.sqrt(d) if self.beta_h is None else float(self.beta_h)

    def n_region(self, n_patches: int) -> int:
        side = _grid_side(n_patches)
        return sum((side // s) ** 2 for s in self.scales) if self.use_region else 0

    def context_length(self, n_patches: int, n_text: int) -> int:
        return n_patches + self.n_region(n_patches) + n_text


@dataclass
class GuidedText:
    t_tilde: Var
    alpha: np.ndarray  # (B, N_t)
    beta: np.ndarray  # (B, d)


def _grid_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"{n} patch tokens do not form a square grid")
    return side


# ---------------------------------------------------------------------------
# parameters


def init_crid(store: ParamStore, bcfg: BackboneConfig, cfg: CRIDConfig, rng: np.random.Generator) -> None:
    d = bcfg.d
    if cfg.d_t != d:
        store.add("crid.g.w", _uniform(rng, cfg.d_t, (cfg.d_t, d)))
        store.add("crid.g.b", _uniform(rng, cfg.d_t, (d,)))
    # disabled components still draw their tensors (into a scratch store) so that
    # the shared tensors of every ablation variant start from identical values
    scratch = ParamStore()
    init_mlp(store if cfg.use_cmg else scratch, "crid.f", d, cfg.f_hidden, cfg.max_tokens + d, rng)
    pool = store if cfg.use_hopfield else scratch
    pool.add("crid.pool.q", _uniform(rng, d, (cfg.memory, d)))
    if cfg.pool_projections:
        pool.add("crid.pool.wk", _uniform(rng, d, (d, d)))
        pool.add("crid.pool.wv", _uniform(rng, d, (d, d)))
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"crid.mha.{name}", _uniform(rng, d, (d, d)))
    if not cfg.identity_decoder:
        init_mlp(store, "crid.mlp", d, cfg.mlp_ratio * d, d, rng)
    store.add("crid.head.w", _uniform(rng, d, (d, bcfg.patch_dim)))
    store.add("crid.head.b", _uniform(rng, d, (bcfg.patch_dim,)))


# ---------------------------------------------------------------------------
# cross-modal guidance


def project_text(params: ParamStore, T) -> Var:
    """U = g(T); identity when the text width already matches d."""
    T = T if isinstance(T, Var) else Var(T)
    if "crid.g.w" not in params:
        return T
    return nc.linear(T, params.var("crid.g.w"), params.var("crid.g.b"))


def cmg_forward(params: ParamStore, cfg: CRIDConfig, T, C) -> GuidedText:
    """Token-wise then channel-wise gating of projected text, driven by C."""
    T = T if isinstance(T, Var) else Var(T)
    C = C if isinstance(C, Var) else Var(C)
    B, n_t, d_t = T.shape
    if n_t > cfg.max_tokens:
        raise ShapeError(f"{n_t} text tokens exceed the maximum of {cfg.max_tokens}")
    if d_t != cfg.d_t:
        raise ShapeError(f"text width {d_t} != configured {cfg.d_t}")
    U = project_text(params, T)
    d = U.shape[-1]
    q = mlp(params, "crid.f", C)  # (B, 1, max_tokens + d)
    g = gate_text(U, nc.take(q, (Ellipsis, slice(0, n_t))), nc.take(q, (Ellipsis, slice(cfg.max_tokens, cfg.max_tokens + d))))
    if cfg.gate_rescale:
        # the two softmax gates shrink each entry by ~1/(N_t d); undo that on average
        g.t_tilde = nc.scale(g.t_tilde, float(n_t * d))
    return g


def gate_text(U, q_tok, q_ch) -> GuidedText:
    """Apply the two gates given the query pieces (exposed for direct testing)."""
    U = U if isinstance(U, Var) else Var(U)
    q_tok = q_tok if isinstance(q_tok, Var) else Var(q_tok)
    q_ch = q_ch if isinstance(q_ch, Var) else Var(q_ch)
    alpha = nc.softmax(nc.mm(q_ch, nc.swapaxes(U, -1, -2)))  # (B, 1, N_t)
    U1 = nc.mul(U, nc.swapaxes(alpha, -1, -2))  # row (token) scaling
    beta = nc.softmax(nc.mm(q_tok, U1))  # (B, 1, d)
    t_tilde = nc.mul(U1, beta)  # column (channel) scaling
    return GuidedText(t_tilde, alpha.value[..., 0, :], beta.value[..., 0, :])


# ---------------------------------------------------------------------------
# cross-modal interaction


def region_tokens(P, scales) -> Var:
    """Average-pool the patch-token grid at each scale (ascending) and stack."""
    P = P if isinstance(P, Var) else Var(P)
    side = _grid_side(P.shape[1])
    parts = []
    for s in sorted(scales):
        if s <= 0 or side % s:
            raise ShapeError(f"scale {s} does not divide token-grid side {side}")
        parts.append(nc.pool_tokens(P, side, s))
    return nc.concat(parts, axis=1)


def hopfield_pool(params: ParamStore, cfg: CRIDConfig, X) -> Var:
    """Z = softmax(beta_h * Q_h (X K)^T) (X V); K = V = I without projections."""
    X = X if isinstance(X, Var) else Var(X)
    L, d = X.shape[-2:]
    if 4 * cfg.memory > L:
        raise ConfigError(f"memory tokens M={cfg.memory} exceed L/4 for L={L}")
    Q = params.var("crid.pool.q")
    if cfg.pool_projections:
        XK = nc.mm(X, params.var("crid.pool.wk"))
        XV = nc.mm(X, params.var("crid.pool.wv"))
    else:
        XK = XV = X
    A = nc.softmax(nc.scale(nc.mm(Q, nc.swapaxes(XK, -1, -2)), cfg.inverse_temperature(d)))
    return nc.mm(A, XV)


def build_context(P, t_tilde, cfg: CRIDConfig) -> Var:
    parts = [P]
    if cfg.use_region:
        parts.append(region_tokens(P, cfg.scales))
    parts.append(t_tilde)
    return nc.concat(parts, axis=1)


def cmi_forward(params: ParamStore, cfg: CRIDConfig, P, t_tilde, return_parts: bool = False):
    """Memory cross-attention with residual, then the decoder MLP."""
    P = P if isinstance(P, Var) else Var(P)
    t_tilde = t_tilde if isinstance(t_tilde, Var) else Var(t_tilde)
    if P.shape[-1] != t_tilde.shape[-1] or P.shape[0] != t_tilde.shape[0]:
        raise ShapeError(f"patch tokens {P.shape} and guided text {t_tilde.shape} disagree")
    X = build_context(P, t_tilde, cfg)
    if cfg.use_hopfield:
        mem = hopfield_pool(params, cfg, X)
    else:
        mem = X
        log.debug("full-context attention: cost ratio L/M = %d/%d", X.shape[1], cfg.memory)
    P_hat = nc.add(_memory_attention(params, P, mem, cfg.heads), P)
    P_out = P_hat if cfg.identity_decoder else mlp(params, "crid.mlp", P_hat)
    if return_parts:
        return P_out, {"X": X, "Z": mem, "P_hat": P_hat}
    return P_out


def _memory_attention(params: ParamStore, P, mem, heads: int) -> Var:
    return attention(params, "crid.mha", P, mem, heads)


def crid_predict(params: ParamStore, bcfg: BackboneConfig, cfg: CRIDConfig, P, C, T) -> Var:
    """Decode ``(B, V, H, W)`` normalized forecasts from (P, C) and text features."""
    if cfg.use_cmg:
        t_tilde = cmg_forward(params, cfg, T, C).t_tilde
    else:
        t_tilde = project_text(params, T)
    P_out = cmi_forward(params, cfg, P, t_tilde)
    t = nc.linear(P_out, params.var("crid.head.w"), params.var("crid.head.b"))
    return unpatchify(t, bcfg.patch, bcfg.n_vars, bcfg.H, bcfg.W)


def attention_cost_ratio(cfg: CRIDConfig, n_patches: int, n_text: int) -> float:
    """Key count of full-context attention relative to pooled memory."""
    return cfg.context_length(n_patches, n_text) / cfg.memory
