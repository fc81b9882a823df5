"""Dense tensors with reverse-mode automatic differentiation.

Storage is a row-major (C-contiguous) numpy float32 array. Each op that
consumes a tensor requiring grad records a backward rule on its output;
``backward`` replays the recorded graph in reverse topological order.
float64 is accepted too so test oracles can run the same graph at higher
precision, but the package itself runs fp32 throughout.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

# Additive mask value for disallowed attention slots. Large enough to zero
# the softmax weight in fp32, small enough not to overflow.
NEG_INF = -1e9


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(dtype)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d.
        self.data: np.ndarray = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        # Graph bookkeeping; populated by _make_result for recorded ops.
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op: str = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    # Sugar; the functional forms below are the canonical API.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def freeze(t: Tensor) -> None:
    """Mark a tensor as frozen: no grad is accumulated on it and optimizers
    skip it, but gradients still propagate through ops that consume it."""
    t.requires_grad = False
    t.grad = None


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make_result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _scalar(g: np.ndarray) -> float:
    return float(g.reshape(-1)[0])


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_result(data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        data = a.data * s

        def backward_scalar(g):
            return (g * s,)

        return _make_result(data, (a,), backward_scalar, "mul_scalar")
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_result(data, (a, b), backward, "mul")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = x * sig

    def backward(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _make_result(data, (a,), backward, "silu")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make_result(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make_result(data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make_result(data, tuple(tensors), backward, "concat")


def slice_(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _make_result(np.ascontiguousarray(data), (a,), backward, "slice")


def repeat_interleave(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slab along ``axis`` ``repeats`` times (GQA head sharing)."""
    data = np.repeat(a.data, repeats, axis=axis)

    def backward(g):
        shape = list(a.shape)
        shape[axis:axis + 1] = [a.shape[axis], repeats]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _make_result(data, (a,), backward, "repeat_interleave")


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Either both operands share identical leading batch
    dims, or ``b`` is a 2-D weight applied to the trailing axis of ``a``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims disagree for {a.shape} x {b.shape}")
    if not (a.shape[:-2] == b.shape[:-2] or b.ndim == 2):
        raise ShapeMismatchError(f"matmul: batch dims disagree for {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if gb.shape != b.shape:  # 2-D weight used across batch dims
            gb = gb.reshape((-1,) + b.shape).sum(axis=0)
        return ga, gb

    return _make_result(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# reductions and normalization


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        return (np.full(a.shape, _scalar(g), dtype=a.dtype),)

    return _make_result(data, (a,), backward, "sum_all")


def mean_all(a: Tensor) -> Tensor:
    return mul(sum_all(a), 1.0 / a.size)


def softmax_last(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _make_result(data, (a,), backward, "softmax_last")


def rms_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    """Scale the last axis to unit RMS (no learned gain here)."""
    ms = np.mean(np.square(a.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    data = a.data * r
    n = a.shape[-1]

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True) / n
        return (r * (g - data * dot),)

    return _make_result(data, (a,), backward, "rms_norm")


# ---------------------------------------------------------------------------
# embedding and losses


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make_result(data, (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over all positions.

    ``logits``: (..., vocab); ``targets``: integer array matching the
    leading dims.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatchError(
            f"cross_entropy: targets {targets.shape} do not match logits {logits.shape}"
        )
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    flat_t = targets.reshape(-1)
    flat_lp = logp.reshape(-1, logp.shape[-1])
    count = flat_t.size
    nll = -flat_lp[np.arange(count), flat_t].mean()
    data = np.asarray(nll, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(logp)
        grad = probs.reshape(-1, probs.shape[-1]).copy()
        grad[np.arange(count), flat_t] -= 1.0
        grad *= _scalar(g) / count
        return (grad.reshape(logits.shape),)

    return _make_result(data, (logits,), backward, "cross_entropy")


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean elementwise absolute difference."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    data = np.asarray(np.abs(diff).mean(), dtype=a.dtype)
    count = a.size

    def backward(g):
        s = np.sign(diff) * (_scalar(g) / count)
        return s.astype(a.dtype), (-s).astype(a.dtype)

    return _make_result(data, (a, b), backward, "l1_distance")


# ---------------------------------------------------------------------------
# rotary positions


def _rope_angles(positions: np.ndarray, half: int, base: float) -> np.ndarray:
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / (2 * half))
    return positions.astype(np.float64)[..., None] * inv_freq  # (..., half)


def rotary(x: Tensor, positions: np.ndarray, base: float) -> Tensor:
    """Rotate per-head feature pairs by position-dependent angles.

    ``x``: (batch, heads, seq, head_dim) with even head_dim; ``positions``:
    (batch, seq) integer array. Pairs are (d, d + head_dim/2). The rotation
    is orthogonal, so vector norms (and RMS) are preserved.
    """
    if x.ndim != 4 or x.shape[-1] % 2 != 0:
        raise ShapeMismatchError(f"rotary: need (b, h, s, even d), got {x.shape}")
    half = x.shape[-1] // 2
    ang = _rope_angles(np.asarray(positions), half, base)  # (b, s, half)
    cos = np.cos(ang)[:, None, :, :].astype(x.dtype)  # (b, 1, s, half)
    sin = np.sin(ang)[:, None, :, :].astype(x.dtype)
    x1 = x.data[..., :half]
    x2 = x.data[..., half:]
    data = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1 = g[..., :half]
        g2 = g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, -g1 * sin + g2 * cos], axis=-1),)

    return _make_result(data, (x,), backward, "rotary")


# ---------------------------------------------------------------------------
# backward engine


def trace(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of the recorded graph under ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf under ``root``.

    Contributions from fan-out accumulate additively. The root must be
    scalar-shaped.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar-shaped, got shape {root.shape}")
    order = trace(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if not (p.requires_grad or p._parents):
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # Leaves that also appear as parents elsewhere keep accumulating via
        # the dict; their .grad is written when they are visited above.
    # Any leaf grads left unvisited (root==leaf case handled above).


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                   requires_grad: bool = True) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32),
                  requires_grad=requires_grad)
