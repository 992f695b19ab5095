"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy float64 array plus an optional gradient
buffer. Every operation records its parents and a backward closure on
the result, forming a dynamic graph that dies with its references once
a step completes. ``backward`` on a scalar loss walks the graph in
reverse topological order and accumulates gradients into every
reachable tensor that has ``requires_grad`` set.

Broadcasting is deliberately restricted: elementwise ops require exact
shape matches, and the only implicit alignments are the documented ones
(a 2-D right operand in ``matmul`` acting as a shared weight, bias over
the last axis, head masks over the trailing two axes). Anything else
must go through ``tile_leading``. This keeps shape bugs loud.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from . import _kernels

__all__ = [
    "Tensor", "ShapeError", "GraphError", "tensor", "no_grad",
    "set_finite_checks", "add", "sub", "mul", "neg", "scale", "add_bias",
    "mul_const", "matmul", "tile_leading", "reshape", "swapaxes", "concat",
    "narrow", "take_rows", "sum_all", "mean_axis", "softmax", "layer_norm",
    "gelu", "attention", "outer_fuse", "mul_heads", "head_mix",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Invalid use of the autodiff graph."""


_GRAD_ENABLED = [True]
_CHECK_FINITE = [os.environ.get("MINIVLA_CHECK_FINITE", "0") == "1"]


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (slow; for tests)."""
    _CHECK_FINITE[0] = bool(enabled)


@contextmanager
def no_grad():
    """Suppress graph recording inside the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    __slots__ = ("array", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, array, requires_grad: bool = False):
        arr = np.asarray(array, dtype=np.float64)
        if _CHECK_FINITE[0] and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return np.ascontiguousarray(self.array).reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.array.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate grads of every requires_grad tensor reachable from self.

        Requires a scalar (single-element) tensor. Repeated calls without
        zero_grad accumulate.
        """
        if self.array.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.array)}
        # Count pending consumers so intermediate grads can be freed early.
        pending: dict[int, int] = {}
        for node in order:
            for p in node._parents:
                pending[id(p)] = pending.get(id(p), 0) + 1
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] += pg
                else:
                    grads[key] = pg

    # Operator sugar for the common cases; full API is the module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"


def tensor(array, requires_grad: bool = False) -> Tensor:
    return Tensor(array, requires_grad=requires_grad)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(arr: np.ndarray, parents: tuple, backward) -> Tensor:
    if _CHECK_FINITE[0] and not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite values produced by op")
    out = Tensor.__new__(Tensor)
    out.array = arr
    out.grad = None
    track = _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural ops

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.array + b.array, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.array - b.array, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    return _make(a.array * b.array,
                 (a, b),
                 lambda g: (g * b.array, g * a.array))


def neg(a: Tensor) -> Tensor:
    return _make(-a.array, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.array * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (no gradient to c)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return _make(a.array * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes (b matches last axis)."""
    if b.shape != x.shape[-1:]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _make(x.array + b.array, (x, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either both operands share identical leading batch
    dims, or b is 2-D and acts as a weight shared across the batch."""
    if a.array.ndim < 2 or b.array.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    shared_weight = b.array.ndim == 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} vs {b.shape}")
    out = a.array @ b.array

    def backward(g):
        ga = g @ np.swapaxes(b.array, -1, -2)
        if shared_weight:
            k = a.shape[-1]
            n = b.shape[-1]
            gb = a.array.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.array, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def tile_leading(x: Tensor, reps: tuple) -> Tensor:
    """Explicit broadcast: prepend axes of sizes ``reps`` by replication."""
    reps = tuple(int(r) for r in reps)
    out = np.broadcast_to(x.array, reps + x.shape).copy()

    def backward(g):
        return (g.reshape((-1,) + x.shape).sum(axis=0),)

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _make(x.array.reshape(shape), (x,),
                 lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.array, a, b), (x,),
                 lambda g: (np.swapaxes(g, a, b),))


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.array for p in parts], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), backward)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.array.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.array)
        full[idx] = g
        return (full,)

    return _make(x.array[idx].copy(), (x,), backward)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table by integer index array (embedding lookup)."""
    idx = np.asarray(idx)
    if table.array.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for table of {table.shape[0]} rows")
    out = table.array[idx]

    def backward(g):
        gt = np.zeros_like(table.array)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.array.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]

    def backward(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _make(x.array.mean(axis=axis), (x,), backward)


# ---------------------------------------------------------------------------
# nonlinear ops

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = axis if axis >= 0 else x.array.ndim + axis
    if ax < 0 or ax >= x.array.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    shifted = x.array - x.array.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=ax, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.array.mean(axis=-1, keepdims=True)
    var = x.array.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.array - mu) * inv
    out = xhat * gamma.array + beta.array

    def backward(g):
        gg = g * gamma.array
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        lead = g.reshape(-1, g.shape[-1])
        dgamma = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
        dbeta = lead.sum(axis=0)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.array * _INV_SQRT2))
    out = x.array * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.array * x.array) * _INV_SQRT2PI
        return (g * (cdf + x.array * pdf),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# fused attention and the fusion-path ops

def attention(q: Tensor, k: Tensor, v: Tensor, key_valid, query_valid=None) -> Tensor:
    """Masked scaled-dot-product attention.

    q: (B, Tq, Nq, h); k, v: (B, Tk, Nv, h) with Nq divisible by Nv
    (each KV head serves Nq/Nv query heads); key_valid: (B, Tk) bools.
    Scale is 1/sqrt(h). Query rows with no valid key yield zeros, as do
    rows flagged invalid in query_valid (their consumers mask them too).
    """
    if q.array.ndim != 4 or k.array.ndim != 4 or v.array.ndim != 4:
        raise ShapeError("attention: q/k/v must be 4-D (B, T, heads, width)")
    B, Tq, Nq, H = q.shape
    if k.shape != v.shape:
        raise ShapeError(f"attention: k {k.shape} and v {v.shape} differ")
    if k.shape[0] != B or k.shape[3] != H:
        raise ShapeError(f"attention: q {q.shape} incompatible with k {k.shape}")
    Nv = k.shape[2]
    if Nq % Nv != 0:
        raise ShapeError(f"attention: query heads {Nq} not divisible by kv heads {Nv}")
    valid = np.ascontiguousarray(np.asarray(key_valid, dtype=np.uint8))
    if valid.shape != (B, k.shape[1]):
        raise ShapeError(f"attention: key_valid {valid.shape} must be (B, Tk)")
    if query_valid is None:
        qvalid = np.ones((B, Tq), dtype=np.uint8)
    else:
        qvalid = np.ascontiguousarray(np.asarray(query_valid, dtype=np.uint8))
        if qvalid.shape != (B, Tq):
            raise ShapeError(f"attention: query_valid {qvalid.shape} must be (B, Tq)")
    qa = np.ascontiguousarray(q.array)
    ka = np.ascontiguousarray(k.array)
    va = np.ascontiguousarray(v.array)
    out = np.empty_like(qa)
    mstat = np.empty((B, Nq, Tq))
    lstat = np.empty((B, Nq, Tq))
    _kernels.attn_fwd(qa, ka, va, valid, qvalid, out, mstat, lstat)

    def backward(g):
        dq = np.zeros_like(qa)
        dk = np.zeros_like(ka)
        dv = np.zeros_like(va)
        _kernels.attn_bwd(qa, ka, va, valid, out, mstat, lstat,
                          np.ascontiguousarray(g), dq, dk, dv)
        return dq, dk, dv

    return _make(out, (q, k, v), backward)


def outer_fuse(qr: Tensor, x: Tensor) -> Tensor:
    """Pair every query head with every KV head by elementwise product.

    qr: (B, Ns, h) broadcast over tokens; x: (B, T, Nv, h).
    Returns (B, T, Ns*Nv, h) with row p*Nv+q equal to qr[p] * x[:, :, q].
    """
    if qr.array.ndim != 3 or x.array.ndim != 4:
        raise ShapeError(f"outer_fuse: expected (B,Ns,h) and (B,T,Nv,h), got {qr.shape} and {x.shape}")
    B, Ns, H = qr.shape
    if x.shape[0] != B or x.shape[3] != H:
        raise ShapeError(f"outer_fuse: head width mismatch, {qr.shape} vs {x.shape}")
    T, Nv = x.shape[1], x.shape[2]
    out = (qr.array[:, None, :, None, :] * x.array[:, :, None, :, :])

    def backward(g):
        g5 = g.reshape(B, T, Ns, Nv, H)
        dqr = np.einsum("btpqh,btqh->bph", g5, x.array, optimize=True)
        dx = np.einsum("btpqh,bph->btqh", g5, qr.array, optimize=True)
        return dqr, dx

    return _make(out.reshape(B, T, Ns * Nv, H), (qr, x), backward)


def mul_heads(x: Tensor, m: Tensor) -> Tensor:
    """Elementwise product with a per-head mask broadcast over leading axes.

    m must match the trailing two axes of x ((heads, h))."""
    if m.shape != x.shape[-2:]:
        raise ShapeError(f"mul_heads: mask {m.shape} does not match trailing axes of {x.shape}")

    def backward(g):
        dm = (g * x.array).reshape((-1,) + m.shape).sum(axis=0)
        return g * m.array, dm

    return _make(x.array * m.array, (x, m), backward)


def head_mix(x: Tensor, w: Tensor) -> Tensor:
    """Linear recombination along the head axis.

    x: (B, T, F, h), w: (R, F) -> (B, T, R, h) where output head r is
    sum_u w[r, u] * x[..., u, :]."""
    if x.array.ndim != 4 or w.array.ndim != 2:
        raise ShapeError(f"head_mix: expected (B,T,F,h) and (R,F), got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[2]:
        raise ShapeError(f"head_mix: head axis mismatch, {x.shape} vs {w.shape}")
    out = np.einsum("btfh,rf->btrh", x.array, w.array, optimize=True)

    def backward(g):
        dx = np.einsum("btrh,rf->btfh", g, w.array, optimize=True)
        dw = np.einsum("btrh,btfh->rf", g, x.array, optimize=True)
        return dx, dw

    return _make(out, (x, w), backward)
