"""Dense float64 tensor engine with reverse-mode automatic differentiation.

Tensors are row-major contiguous numpy arrays of rank 0-3.  Every
differentiable operation records its parents and a vector-Jacobian
closure on the output tensor; ``backward`` linearizes that record into a
tape (producers before consumers) and replays it in reverse.

There is no silent broadcasting.  The only shape mixing allowed in
binary ops is adding a parameter shared across leading axes (a last-dim
vector, a trailing matrix, or a single scalar), each with an explicit
reduction rule in the backward pass.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording, e.g. for evaluation-time forward passes."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array plus an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps rank 0 at rank 0
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _linearize(root: Tensor) -> list[Tensor]:
    """Tape for ``root``: topological order, producers before consumers."""
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


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar.  Repeated calls accumulate into ``grad``
    until ``zero_grad``; propagation itself uses pass-local buffers, so
    two backward calls add exactly twice the gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = _linearize(loss)
    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape):
        g = flowing.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += g
        if t._vjp is None:
            continue
        for parent, pg in zip(t._parents, t._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def _shared_param_axes(a: Tensor, b: Tensor) -> tuple[int, ...] | None:
    """Axes of ``a`` over which ``b``'s gradient must be reduced.

    Returns () for identical shapes, the leading axes when ``b`` is a
    trailing-shape parameter (last-dim vector or trailing matrix), the
    full axis set when ``b`` is a single element, and None if the pair
    is not allowed.
    """
    if b.shape == a.shape:
        return ()
    if b.size == 1:
        return tuple(range(a.ndim))
    if b.ndim < a.ndim and b.shape == a.shape[a.ndim - b.ndim:]:
        return tuple(range(a.ndim - b.ndim))
    return None


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b is same-shape or a trailing-shape shared parameter."""
    axes = _shared_param_axes(a, b)
    if axes is None:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}")

    def vjp(g):
        gb = g if axes == () else g.sum(axis=axes).reshape(b.shape)
        return g, gb

    return _record(a.data + b.data.reshape(b.shape), (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """a - b, same shape rules as ``add``."""
    axes = _shared_param_axes(a, b)
    if axes is None:
        raise ValueError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def vjp(g):
        gb = g if axes == () else g.sum(axis=axes).reshape(b.shape)
        return g, -gb

    return _record(a.data - b.data.reshape(b.shape), (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def vjp(g):
        return g * b.data, g * a.data

    return _record(a.data * b.data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    return _record(a.data * s, (a,), lambda g: (g * s,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"reshape {a.shape} -> {shape} changes element count")
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes (rank >= 2)."""
    if a.ndim < 2:
        raise ValueError("transpose requires rank >= 2")
    return _record(
        np.ascontiguousarray(np.swapaxes(a.data, -1, -2)),
        (a,),
        lambda g: (np.ascontiguousarray(np.swapaxes(g, -1, -2)),),
    )


def concat_lastdim(parts: list[Tensor]) -> Tensor:
    """Concatenate along the last axis; leading shapes must agree."""
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise ValueError("concat_lastdim leading shapes differ")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), vjp)


def outer_add(a: Tensor, b: Tensor) -> Tensor:
    """out[..., i, j] = a[..., i] + b[..., j]; leading shapes must agree."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"outer_add leading shapes differ: {a.shape}, {b.shape}")

    def vjp(g):
        return g.sum(axis=-1), g.sum(axis=-2)

    return _record(a.data[..., :, None] + b.data[..., None, :], (a, b), vjp)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of a 2-D ``table`` selected by an integer array of any shape.

    Output shape ids.shape + (width,); backward scatter-adds into the
    table, so repeated ids accumulate.
    """
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ValueError("gather_rows requires a 2-D table")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"row index out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    width = table.shape[1]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, width))
        return (gt,)

    return _record(table.data[ids], (table,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value`` (often -inf)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError(f"masked_fill mask shape {mask.shape} != {a.shape}")
    return _record(
        np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),)
    )


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive inputs")
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed as -log(1 + exp(-x)) without overflow."""
    out = -np.logaddexp(0.0, -a.data)
    return _record(out, (a,), lambda g: (g * _sigmoid(-a.data),))


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction.

    Entries equal to -inf get exactly zero weight; a fully masked slice
    is rejected rather than producing NaNs.
    """
    m = a.data.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax over a fully -inf slice")
    e = np.exp(a.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-slice normalization over the last axis, then affine transform.

    gain and bias are vectors matching the last extent; the variance
    denominator is sqrt(var + eps).
    """
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last extent")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    lead_axes = tuple(range(a.ndim - 1))

    def vjp(g):
        ggain = (g * xhat).sum(axis=lead_axes)
        gbias = g.sum(axis=lead_axes)
        gx = g * gain.data
        gx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _record(xhat * gain.data + bias.data, (a, gain, bias), vjp)


# ---------------------------------------------------------------------------
# contractions and reductions
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supported rank pairs: (2,2) plain; (3,2) batch of matrices times a
    shared matrix; (3,3) per-batch product.  Inner extents must match.
    """
    if a.shape[-1] != b.shape[-2 if b.ndim >= 2 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim == 2:

        def vjp(g):
            return g @ b.data.T, a.data.T @ g

    elif a.ndim == 3 and b.ndim == 2:

        def vjp(g):
            return g @ b.data.T, np.einsum("bpq,bpr->qr", a.data, g)

    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

        def vjp(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    else:
        raise ValueError(f"matmul unsupported ranks: {a.ndim} @ {b.ndim}")
    return _record(a.data @ b.data, (a, b), vjp)


def sum_all(a: Tensor) -> Tensor:
    return _record(
        np.asarray(a.data.sum()),
        (a,),
        lambda g: (np.full(a.shape, np.asarray(g).reshape(())),),
    )


def sum_lastdim(a: Tensor) -> Tensor:
    def vjp(g):
        return (np.broadcast_to(g[..., None], a.shape).copy(),)

    return _record(a.data.sum(axis=-1), (a,), vjp)


# ---------------------------------------------------------------------------
# flat binary serialization
# ---------------------------------------------------------------------------

_U64 = struct.Struct("<Q")


def save_tensor(path, t: Tensor) -> None:
    """Write rank and extents as little-endian uint64, then the values
    as little-endian float64, row-major."""
    with open(path, "wb") as fh:
        fh.write(_U64.pack(t.ndim))
        for extent in t.shape:
            fh.write(_U64.pack(extent))
        fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ValueError(f"{path}: truncated tensor header")
        (rank,) = _U64.unpack(raw)
        extents = []
        for _ in range(rank):
            raw = fh.read(8)
            if len(raw) != 8:
                raise ValueError(f"{path}: truncated extent list")
            extents.append(_U64.unpack(raw)[0])
        count = int(np.prod(extents, dtype=np.int64)) if extents else 1
        body = fh.read(count * 8)
        if len(body) != count * 8:
            raise ValueError(f"{path}: body shorter than extents imply")
        data = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(extents)
    return Tensor(data)
