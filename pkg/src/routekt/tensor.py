"""Dense float64 tensors with reverse-mode differentiation.

Every tensor wraps a numpy array. Operations record a closure that maps the
output gradient to input gradients; :meth:`Tensor.backward` walks the graph
once in reverse topological order and accumulates into leaf ``.grad``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

MASK_FILL = -1e9
EXP_FLOOR = -60.0


class ShapeError(ValueError):
    pass


class MaskError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class MaskCounter:
    """Counts attention rows whose allowed set was empty."""

    def __init__(self) -> None:
        self.fully_masked_rows = 0

    def add(self, n: int) -> None:
        self.fully_masked_rows += int(n)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.writeable:
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``.grad`` on every leaf that requires it with d(self)/d(leaf)."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so neither branch exponentiates a large positive number.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def relu(a: Tensor) -> Tensor:
    x = a.data
    on = x > 0
    return _make(np.where(on, x, 0.0), (a,), lambda g: (g * on,), "relu")


def abs_(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def clip(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient is zero wherever a bound is active."""
    x = a.data
    out = np.clip(x, lo, hi)
    passthrough = out == x
    return _make(out, (a,), lambda g: (g * passthrough,), "clip")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # Fold leading axes of the left operand into one GEMM.
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(lead + (bd.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward, "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def embedding_gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; the backward pass scatter-adds into the rows."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"embedding_gather: indices must be integers, got {idx.dtype}")
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"embedding_gather: index out of range for table with {n} rows")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (out,)

    return _make(table.data[idx], (table,), backward, "gather")


# ---------------------------------------------------------------- fused ops


def _check_mask(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise MaskError("mask entries must be 0 or 1")
        m = m.astype(bool)
    return m


def masked_softmax(scores: Tensor, mask, counter: MaskCounter | None = None) -> Tensor:
    """Softmax over the last axis restricted to entries where ``mask`` is 1.

    Masked entries get ``MASK_FILL`` added before normalisation, so their
    probability underflows to exactly 0. Rows with no allowed entry return all
    zeros.
    """
    scores = as_tensor(scores)
    m = _check_mask(mask)
    try:
        np.broadcast_shapes(m.shape, scores.shape)
    except ValueError:
        raise ShapeError(f"masked_softmax: mask shape {m.shape} does not fit scores {scores.shape}") from None
    z = scores.data + np.where(m, 0.0, MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    live = np.broadcast_to(m, p.shape).any(axis=-1, keepdims=True)
    p = np.where(live, p, 0.0)
    if counter is not None:
        counter.add(np.size(live) - np.count_nonzero(live))

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (scores,), backward, "masked_softmax")


def exclusive_suffix_prod(a: Tensor) -> Tensor:
    """``out[..., i] = prod(a[..., i+1:])`` along the last axis (empty product is 1)."""
    x = a.data
    n = x.shape[-1]
    out = np.ones_like(x)
    for i in range(n - 2, -1, -1):
        out[..., i] = out[..., i + 1] * x[..., i + 1]

    def backward(g):
        # Walk the recurrence out[i] = x[i+1] * out[i+1] forwards; no division, so zeros are safe.
        gx = np.zeros_like(x)
        carry = np.zeros(x.shape[:-1])
        for i in range(n - 1):
            carry = carry + g[..., i]
            gx[..., i + 1] = carry * out[..., i + 1]
            carry = carry * x[..., i + 1]
        return (gx,)

    return _make(out, (a,), backward, "suffix_prod")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not fit input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- checking


def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f()`` with respect to ``t``."""
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-3, atol: float = 1e-7) -> bool:
    """Relative agreement, with an absolute floor for entries that are near zero."""
    err = np.abs(analytic - numeric)
    return bool(np.all(err <= atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))))


def parameters_grad_zero(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
