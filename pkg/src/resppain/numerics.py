"""Dense-array math with reverse-mode gradients.

Everything differentiable in this package goes through the ops defined
here: a small define-by-run tape over numpy arrays.  Tensors store values
in float32 by default (float64 available for numerical checks); every
reduction -- matmul contractions, softmax denominators, norm statistics,
sums and means -- accumulates in float64 before the result is rounded
back to the storage dtype.  Tensors are immutable after construction;
each op returns a new Tensor and records a backward closure, so the tape
for a forward pass is simply the set of result nodes in creation order.

RNG is never global: any stochastic op (dropout) takes an explicit
numpy Generator.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; message names the shapes."""


class TapeError(RuntimeError):
    """Raised when backward is invoked on an already-consumed tape."""


_grad_enabled = True
_next_node_id = 0


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable numpy-backed value node.  Leaves with requires_grad=True
    are parameters; interior nodes carry a backward closure."""

    __slots__ = ("data", "requires_grad", "grad", "_id", "_parents", "_bwd", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        global _next_node_id
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 0:          # ascontiguousarray promotes 0-d to (1,)
            arr = np.ascontiguousarray(arr)
        if arr is data:           # never freeze a caller-owned buffer in place
            arr = arr.copy()
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._id = _next_node_id
        _next_node_id += 1
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"


def parameter(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def constant(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Leaf tensor outside the gradient graph."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bwd) -> Tensor:
    """Wrap an op result, recording the closure when the tape is live."""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._bwd = bwd
    return out


def _store(arr: np.ndarray, like: Tensor) -> np.ndarray:
    """Round a float64 accumulation back to the storage dtype."""
    out = np.asarray(arr, dtype=like.data.dtype)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return out if out.ndim == 0 else np.ascontiguousarray(out)


def _check_same_dtype(*ts: Tensor) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) > 1:
        raise ShapeError(f"mixed tensor dtypes {sorted(d.name for d in dts)}")


# ---------------------------------------------------------------------------
# arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n)->(m,n); also (k,)@(k,n)->(n,) and (m,k)@(k,)->(m,).

    Contractions run in float64 and round once to the storage dtype, so
    small shapes agree bit-for-bit with a sequential triple-loop oracle.
    """
    _check_same_dtype(a, b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = _store(a64 @ b64, a)

    def bwd(g: np.ndarray):
        g64 = g.astype(np.float64, copy=False)
        if a.data.ndim == 2 and b.data.ndim == 2:
            ga = g64 @ b64.T
            gb = a64.T @ g64
        elif a.data.ndim == 1 and b.data.ndim == 2:
            ga = b64 @ g64          # (k,n)@(n,) -> (k,)
            gb = np.outer(a64, g64)
        else:                       # (m,k)@(k,)
            ga = np.outer(g64, b64)
            gb = a64.T @ g64
        return ga, gb

    return _result(out, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also broadcasts a trailing-dim bias onto rows."""
    _check_same_dtype(a, b)
    if a.shape == b.shape:
        mode = "same"
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        mode = "bias"
    else:
        raise ShapeError(f"add shapes incompatible: {a.shape} + {b.shape}")
    out = _store(a.data.astype(np.float64) + b.data.astype(np.float64), a)

    def bwd(g: np.ndarray):
        if mode == "same":
            return g, g
        # bias grad sums the broadcast axis
        return g, g.astype(np.float64).sum(axis=0)

    return _result(out, (a, b), bwd)


def add_n(parts: Iterable[Tensor]) -> Tensor:
    """Sum of equally-shaped tensors (left fold of add)."""
    parts = list(parts)
    if not parts:
        raise ShapeError("add_n needs at least one tensor")
    acc = parts[0]
    for p in parts[1:]:
        acc = add(acc, p)
    return acc


def sub(a: Tensor, b: Tensor) -> Tensor:
    """a - b, same shapes only."""
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product, same shapes."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")
    out = _store(a.data.astype(np.float64) * b.data.astype(np.float64), a)

    def bwd(g: np.ndarray):
        return g * b.data, g * a.data

    return _result(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """a * scalar constant."""
    s = float(s)
    out = _store(a.data.astype(np.float64) * s, a)

    def bwd(g: np.ndarray):
        return (g * s,)

    return _result(out, (a,), bwd)


def add_const(a: Tensor, c: np.ndarray | float) -> Tensor:
    """a + non-learnable constant (same shape or scalar)."""
    c_arr = np.asarray(c, dtype=np.float64)
    out = _store(a.data.astype(np.float64) + c_arr, a)

    def bwd(g: np.ndarray):
        return (g,)

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing

def transpose(a: Tensor) -> Tensor:
    """Matrix transpose; backward transposes the incoming gradient."""
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    out = np.ascontiguousarray(a.data.T)

    def bwd(g: np.ndarray):
        return (np.ascontiguousarray(g.T),)

    return _result(out, (a,), bwd)


def concat_vec(parts: list[Tensor]) -> Tensor:
    """Concatenate 1-D tensors into one vector."""
    if not parts:
        raise ShapeError("concat_vec needs at least one tensor")
    _check_same_dtype(*parts)
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat_vec expects vectors, got shape {p.shape}")
    sizes = [p.shape[0] for p in parts]
    out = np.concatenate([p.data for p in parts])

    def bwd(g: np.ndarray):
        grads, off = [], 0
        for n in sizes:
            grads.append(g[off:off + n])
            off += n
        return tuple(grads)

    return _result(out, tuple(parts), bwd)


def stack_rows(rows: list[Tensor]) -> Tensor:
    """Stack equal-length vectors into a (R, L) matrix."""
    if not rows:
        raise ShapeError("stack_rows needs at least one tensor")
    _check_same_dtype(*rows)
    lens = {r.shape for r in rows}
    if len(lens) > 1 or rows[0].data.ndim != 1:
        raise ShapeError(f"stack_rows expects equal-length vectors, got {[r.shape for r in rows]}")
    out = np.stack([r.data for r in rows])

    def bwd(g: np.ndarray):
        return tuple(g[i] for i in range(len(rows)))

    return _result(out, tuple(rows), bwd)


def mean_axis0(a: Tensor) -> Tensor:
    """(N, d) -> (d,): column means, float64 accumulation."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_axis0 expects a matrix, got {a.shape}")
    n = a.shape[0]
    out = _store(a.data.astype(np.float64).mean(axis=0), a)

    def bwd(g: np.ndarray):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements -> scalar, float64 accumulation."""
    out = _store(a.data.astype(np.float64).sum(), a)

    def bwd(g: np.ndarray):
        return (np.full(a.shape, float(g), dtype=a.data.dtype),)

    return _result(out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and norms

def gelu(a: Tensor) -> Tensor:
    """Exact erf GELU: x * Phi(x)."""
    x = a.data.astype(np.float64)
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = _store(x * phi, a)

    def bwd(g: np.ndarray):
        # d/dx = Phi(x) + x * pdf(x)
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return _result(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, stable for large |x|."""
    x = a.data.astype(np.float64)
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = _store(s, a)

    def bwd(g: np.ndarray):
        return (g * (s * (1.0 - s)),)

    return _result(out, (a,), bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stable softmax; a vector is treated as one row.

    Shifts by the row max, exponentiates and normalizes in float64, so
    rows sum to one within float32 rounding even for magnitudes ~1e4.
    """
    x = a.data.astype(np.float64)
    one_d = x.ndim == 1
    rows = x[None, :] if one_d else x
    if rows.ndim != 2:
        raise ShapeError(f"softmax_rows expects 1-D/2-D input, got {a.shape}")
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out_p = p[0] if one_d else p
    out = _store(out_p, a)

    def bwd(g: np.ndarray):
        gp = g.astype(np.float64)
        grows = gp[None, :] if one_d else gp
        dot = (grows * p).sum(axis=1, keepdims=True)
        dx = p * (grows - dot)
        return (dx[0] if one_d else dx,)

    return _result(out, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    """Row-stable log softmax (vector treated as one row)."""
    x = a.data.astype(np.float64)
    one_d = x.ndim == 1
    rows = x[None, :] if one_d else x
    shifted = rows - rows.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    p = np.exp(logp)
    out = _store(logp[0] if one_d else logp, a)

    def bwd(g: np.ndarray):
        gp = g.astype(np.float64)
        grows = gp[None, :] if one_d else gp
        dx = grows - p * grows.sum(axis=1, keepdims=True)
        return (dx[0] if one_d else dx,)

    return _result(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Statistics accumulate in float64; variance is the biased (1/d) form.
    """
    _check_same_dtype(a, gain, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = _store(xhat * gain.data.astype(np.float64) + bias.data.astype(np.float64), a)

    def bwd(g: np.ndarray):
        g64 = g.astype(np.float64)
        gx = g64 * gain.data.astype(np.float64)
        # dx = inv * (gx - mean(gx) - xhat * mean(gx * xhat))
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        axes = tuple(range(g64.ndim - 1))
        dgain = (g64 * xhat).sum(axis=axes) if axes else g64 * xhat
        dbias = g64.sum(axis=axes) if axes else g64
        return dx, dgain, dbias

    return _result(out, (a, gain, bias), bwd)


# ---------------------------------------------------------------------------
# stochastic / straight-through

def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability rate, scale kept by 1/(1-rate).

    Identity when training is False (no RNG consumed).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= rate)
    factor = 1.0 / (1.0 - rate)
    out = _store(a.data.astype(np.float64) * keep * factor, a)

    def bwd(g: np.ndarray):
        return (g * keep * np.asarray(factor, dtype=g.dtype),)

    return _result(out, (a,), bwd)


def straight_through(a: Tensor, forward_value: np.ndarray) -> Tensor:
    """Forward emits forward_value; backward passes the gradient to a unchanged.

    The standard estimator for hard discrete decisions made from a soft
    relaxation of the same shape.
    """
    fv = np.asarray(forward_value, dtype=a.data.dtype)
    if fv.shape != a.shape:
        raise ShapeError(f"straight_through value shape {fv.shape} != input {a.shape}")

    def bwd(g: np.ndarray):
        return (g,)

    return _result(fv, (a,), bwd)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode accumulation from a scalar loss.

    Returns {leaf tensor: gradient} for every requires_grad leaf reached
    and accumulates the same gradients into leaf.grad.  The tape for this
    forward pass is consumed: a second call without a fresh forward pass
    raises TapeError.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("stale tape: backward was already run for this forward pass")
    if loss._bwd is None and not loss.requires_grad:
        raise TapeError("loss is not connected to any parameter")

    # Collect reachable nodes; creation order is a topological order.
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        if t._parents and t._bwd is None and t._consumed:
            raise TapeError("stale tape: node already consumed by a previous backward")
        stack.extend(t._parents)

    grads: dict[int, np.ndarray] = {loss._id: np.asarray(1.0, dtype=loss.data.dtype)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for t in sorted(seen.values(), key=lambda n: n._id, reverse=True):
        g = grads.pop(t._id, None)
        if g is None:
            continue
        if t._bwd is None:
            if t.requires_grad:
                g_stored = np.asarray(g, dtype=t.data.dtype)
                leaf_grads[t] = g_stored
                t.grad = g_stored.copy() if t.grad is None else t.grad + g_stored
            continue
        parent_grads = t._bwd(np.asarray(g, dtype=t.data.dtype))
        for p, pg in zip(t._parents, parent_grads):
            if pg is None:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg
        t._bwd = None
        t._consumed = True
    loss._consumed = True
    return leaf_grads


def zero_grads(params: Iterable[Tensor]) -> None:
    """Clear accumulated gradients in place."""
    for p in params:
        p.grad = None
