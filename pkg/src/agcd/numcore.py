"""Float64 operator kit with a tiny reverse-mode tape.

Tensors are plain row-major ``numpy.float64`` arrays.  The four contract
kernels (:func:`matmul`, :func:`softmax_rows`, :func:`avg_pool_grid`,
:func:`broadcast_scale`) validate shapes and work on bare arrays.  The
differentiable versions used by the models live on :class:`Var` and record a
backward closure on the active :class:`Tape`; with no tape active they only
compute values, which is what the finite-difference checker relies on.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d scalars to shape (1,)
    return np.require(np.asarray(x, dtype=DTYPE), requirements="C")


# ---------------------------------------------------------------------------
# contract kernels


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return np.matmul(a, b)


def softmax_rows(m, axis: int = -1) -> np.ndarray:
    m = as_tensor(m)
    if np.isnan(m).any():
        raise NumericError("softmax_rows: NaN in input")
    if not np.isfinite(m).all():
        raise NumericError("softmax_rows: infinite value in input")
    z = np.exp(m - m.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def avg_pool_grid(g, s: int) -> np.ndarray:
    """Mean over non-overlapping ``s x s`` blocks of a ``(..., h, w, d)`` grid."""
    g = as_tensor(g)
    if g.ndim < 3:
        raise ShapeError(f"avg_pool_grid: expected (..., h, w, d), got {g.shape}")
    h, w, d = g.shape[-3:]
    if s <= 0 or h % s or w % s:
        raise ShapeError(f"avg_pool_grid: scale {s} does not divide grid {h}x{w}")
    lead = g.shape[:-3]
    blocks = g.reshape(*lead, h // s, s, w // s, s, d)
    return blocks.sum(axis=(-4, -2)) / float(s * s)


def broadcast_scale(m, w, axis: str) -> np.ndarray:
    """Scale rows (``axis='rows'``) or columns (``axis='cols'``) of ``m`` by ``w``."""
    m, w = as_tensor(m), as_tensor(w).reshape(-1)
    if m.ndim != 2:
        raise ShapeError(f"broadcast_scale: expected a matrix, got {m.shape}")
    if axis == "rows":
        if w.size != m.shape[0]:
            raise ShapeError(f"broadcast_scale: {w.size} weights for {m.shape[0]} rows")
        return m * w[:, None]
    if axis == "cols":
        if w.size != m.shape[1]:
            raise ShapeError(f"broadcast_scale: {w.size} weights for {m.shape[1]} cols")
        return m * w[None, :]
    raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")


# ---------------------------------------------------------------------------
# tape


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Var:
    """A tensor value plus (when recorded) its gradient and backward rule."""

    __slots__ = ("value", "grad", "requires_grad", "_backward", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == DTYPE else as_tensor(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return mm(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _v(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(value: np.ndarray, parents: Sequence[Var], backward) -> Var:
    tape = _active_tape()
    out = Var(value)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        tape.nodes.append(out)
    return out


class Tape:
    """Records differentiable ops executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, tuple[Var, "ParamStore"]] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def param(self, store: "ParamStore", name: str) -> Var:
        leaf = self.leaves.get(name)
        if leaf is None or leaf[1] is not store:
            entry = store.entry(name)
            leaf = (Var(entry.value, requires_grad=entry.trainable), store)
            self.leaves[name] = leaf
        return leaf[0]

    def backward(self, loss: Var, write_to_store: bool = True) -> None:
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)
        if write_to_store:
            for name, (leaf, store) in self.leaves.items():
                entry = store.entry(name)
                if entry.trainable:
                    entry.grad = leaf.grad if leaf.grad is not None else np.zeros_like(entry.value)


# ---------------------------------------------------------------------------
# differentiable ops


def add(a, b) -> Var:
    a, b = _v(a), _v(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _record(a.value + b.value, (a, b), backward)


def sub(a, b) -> Var:
    a, b = _v(a), _v(b)

    def backward(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _record(a.value - b.value, (a, b), backward)


def mul(a, b) -> Var:
    a, b = _v(a), _v(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.value)
        if b.requires_grad:
            b._accumulate(g * a.value)

    return _record(a.value * b.value, (a, b), backward)


def scale(a, c: float) -> Var:
    a = _v(a)
    return _record(a.value * c, (a,), lambda g: a._accumulate(g * c))


def square(a) -> Var:
    a = _v(a)
    return _record(a.value * a.value, (a,), lambda g: a._accumulate(2.0 * g * a.value))


def mm(a, b) -> Var:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _v(a), _v(b)
    value = matmul(a.value, b.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.value, -1, -2)))
        if b.requires_grad:
            if b.value.ndim == 2 and a.value.ndim > 2:
                # shared weight: fold the batch axes into one product
                k = a.value.shape[-1]
                b._accumulate(a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.matmul(np.swapaxes(a.value, -1, -2), g))

    return _record(value, (a, b), backward)


def linear(x, weight, bias=None) -> Var:
    y = mm(x, weight)
    return y if bias is None else add(y, bias)


def reshape(a, shape) -> Var:
    a = _v(a)
    src = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(src)))


def swapaxes(a, i: int, j: int) -> Var:
    a = _v(a)
    return _record(np.swapaxes(a.value, i, j), (a,), lambda g: a._accumulate(np.swapaxes(g, i, j)))


def transpose(a, axes: Sequence[int]) -> Var:
    a = _v(a)
    inv = np.argsort(axes)
    return _record(np.transpose(a.value, axes), (a,), lambda g: a._accumulate(np.transpose(g, inv)))


def concat(parts: Iterable, axis: int) -> Var:
    parts = [_v(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _record(np.concatenate([p.value for p in parts], axis=axis), parts, backward)


def take(a, idx) -> Var:
    a = _v(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[idx] = g
        a._accumulate(full)

    return _record(np.ascontiguousarray(a.value[idx]), (a,), backward)


def expand(a, shape) -> Var:
    a = _v(a)
    return _record(np.broadcast_to(a.value, shape).copy(), (a,), lambda g: a._accumulate(g))


def softmax(a, axis: int = -1) -> Var:
    a = _v(a)
    y = softmax_rows(a.value, axis=axis)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _record(y, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Var:
    """Tanh-form Gaussian error linear unit."""
    a = _v(a)
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _record(y, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    x, gamma, beta = _v(x), _v(gamma), _v(beta)
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate(g * xhat)
        if beta.requires_grad:
            beta._accumulate(g)
        if x.requires_grad:
            gh = g * gamma.value
            x._accumulate(inv / d * (d * gh - gh.sum(-1, keepdims=True) - xhat * (gh * xhat).sum(-1, keepdims=True)))

    return _record(xhat * gamma.value + beta.value, (x, gamma, beta), backward)


def pool_tokens(a, side: int, s: int) -> Var:
    """Average-pool ``(B, side*side, d)`` tokens laid out on a square grid."""
    a = _v(a)
    b, n, d = a.shape
    if side * side != n:
        raise ShapeError(f"pool_tokens: {n} tokens do not form a {side}x{side} grid")
    pooled = avg_pool_grid(a.value.reshape(b, side, side, d), s)
    out_side = side // s

    def backward(g):
        g = g.reshape(b, out_side, 1, out_side, 1, d) / float(s * s)
        g = np.broadcast_to(g, (b, out_side, s, out_side, s, d)).reshape(b, n, d)
        a._accumulate(g)

    return _record(pooled.reshape(b, out_side * out_side, d), (a,), backward)


def sum_all(a) -> Var:
    a = _v(a)
    shape = a.shape
    return _record(np.array(a.value.sum()), (a,), lambda g: a._accumulate(np.broadcast_to(g, shape).copy()))


def mean_all(a) -> Var:
    a = _v(a)
    return scale(sum_all(a), 1.0 / a.value.size)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True


class ParamStore:
    """Named parameter tensors with gradients; names are unique."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = as_tensor(value).copy()
        self._entries[name] = ParamEntry(arr, None, trainable)
        return arr

    def entry(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entry(name).value

    def __setitem__(self, name: str, value) -> None:
        entry = self.entry(name)
        arr = as_tensor(value)
        if arr.shape != entry.value.shape:
            raise ShapeError(f"{name}: cannot assign shape {arr.shape} to {entry.value.shape}")
        entry.value[...] = arr

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def items(self):
        return self._entries.items()

    def var(self, name: str) -> Var:
        tape = _active_tape()
        if tape is None:
            return Var(self.entry(name).value)
        return tape.param(self, name)

    def grad(self, name: str) -> np.ndarray | None:
        return self.entry(name).grad

    def zero_grad(self) -> None:
        for e in self._entries.values():
            e.grad = None

    def n_scalars(self, trainable_only: bool = True) -> int:
        return sum(e.value.size for e in self._entries.values() if e.trainable or not trainable_only)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._entries):
            h.update(name.encode())
            h.update(self._entries[name].value.astype("<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, e in self._entries.items():
            out.add(name, e.value, e.trainable)
        return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    passed: bool
    n_checked: int = 0

    @property
    def worst(self) -> tuple[str, float]:
        if not self.max_rel_error:
            return ("", 0.0)
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the stored analytic gradients against central differences.

    ``loss_fn`` must be deterministic and return a scalar; it is evaluated
    twice per scalar parameter with the parameter nudged by ``+-eps``.
    ``max_per_tensor`` limits each tensor to that many seeded random
    coordinates (all coordinates when None).
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    count = 0
    for name in names if names is not None else params.names():
        entry = params.entry(name)
        if not entry.trainable:
            continue
        if entry.grad is None:
            raise ContractError(f"grad_check: no analytic gradient for {name!r}")
        flat = entry.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            coords = np.sort(rng.choice(flat.size, max_per_tensor, replace=False))
        numeric = np.empty(coords.size, dtype=DTYPE)
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(params))
            flat[i] = orig - eps
            f_minus = float(loss_fn(params))
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f"grad_check: non-finite loss while perturbing {name}[{i}]")
            numeric[k] = (f_plus - f_minus) / (2.0 * eps)
        count += coords.size
        err = relative_error(entry.grad.reshape(-1)[coords], numeric)
        errors[name] = float(err.max()) if err.size else 0.0
    passed = all(e <= tol for e in errors.values())
    return GradCheckReport(errors, tol, passed, count)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: ParamStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected adaptive-moment update, in place on ``params``."""
    trainable = [(n, e) for n, e in params.items() if e.trainable]
    for name, e in trainable:
        if e.grad is None:
            raise ContractError(f"adam_step: missing gradient for {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, e in trainable:
        g = e.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(e.value)
            v = np.zeros_like(e.value)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        e.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
