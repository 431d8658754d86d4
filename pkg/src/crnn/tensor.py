"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a vector-Jacobian
closure on the output tensor. ``backward()`` walks the recorded graph in
reverse topological order, keeping per-pass gradients in a scratch table and
accumulating into ``.grad`` only on leaf tensors, so repeated backward calls
add up instead of corrupting each other.

Shapes follow numpy row-major conventions. Convolution inputs are
(N, C, H, W) batches; a (C, H, W) single image is promoted transparently.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A dense float64 array plus an optional spot in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None

    # -- construction helpers --------------------------------------------

    @staticmethod
    def parameter(data) -> "Tensor":
        return Tensor(data, requires_grad=True)

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd core ----------------------------------------------------

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a scalar (size-1) tensor on a recorded graph.
        Gradients of this pass live in a scratch table; only leaves keep a
        persistent ``.grad``, so calling backward again accumulates.
        """
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar root, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        table: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = table.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._vjp is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = table.get(id(parent))
                table[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, Tensor._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(Tensor._lift(other)))

    def __rsub__(self, other):
        return add(Tensor._lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, Tensor._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, Tensor(1.0 / other))
        return mul(self, power(Tensor._lift(other), -1.0))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, Tensor._lift(other))

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mul(tensor_sum(self), Tensor(1.0 / self.data.size))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def record_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, recording the graph edge only when it matters."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


_make = record_op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _make(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    data = a.data**exponent
    return _make(data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def sigmoid(a: Tensor) -> Tensor:
    # Clip keeps exp from overflowing; saturated values are exact 0/1 anyway.
    y = 1.0 / (1.0 + np.exp(np.clip(-a.data, -500.0, 500.0)))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    y = np.maximum(a.data, 0.0)
    return _make(y, (a,), lambda g: (g * (a.data > 0.0),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# -- reductions and rearrangement --------------------------------------------


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(data, (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of an empty tensor list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), vjp)


def stack0(tensors: Sequence[Tensor]) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("stack of an empty tensor list")
    data = np.stack([t.data for t in tensors], axis=0)

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _make(data, tuple(tensors), vjp)


def take0(a: Tensor, index: int) -> Tensor:
    """Select a[index] along axis 0, dropping that axis.

    The slice is materialized contiguously: frames feed matrix products,
    which hit a slow strided path on transposed views.
    """
    data = np.ascontiguousarray(a.data[index])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(data, (a,), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# -- convolution and pooling ---------------------------------------------------


def _conv_geometry(extent: int, k: int, stride: int, pad: int, name: str) -> int:
    padded = extent + 2 * pad
    if padded < k:
        raise DimensionError(
            f"conv/pool window {k} exceeds padded input {name} extent {padded}"
        )
    return (padded - k) // stride + 1


def _im2col(padded: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c = padded.shape[:2]
    cols = np.empty((c, kh, kw, n, out_h, out_w), dtype=padded.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = padded[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * out_h * out_w)


def _col2im(dcol: np.ndarray, n: int, c: int, hp: int, wp: int,
            kh: int, kw: int, sh: int, sw: int, out_h: int, out_w: int) -> np.ndarray:
    dcols = dcol.reshape(c, kh, kw, n, out_h, out_w)
    dpad = np.zeros((n, c, hp, wp), dtype=dcol.dtype)
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw] += (
                dcols[:, i, j].transpose(1, 0, 2, 3)
            )
    return dpad


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: tuple[int, int] = (1, 1),
           padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Cross-correlate (N,C,H,W) input with (C_out,C,kh,kw) kernels.

    A 3-D (C,H,W) input is treated as a batch of one and returns 3-D output.
    Zero padding; output extents follow floor((ext + 2*pad - k)/stride) + 1.
    """
    squeeze = x.data.ndim == 3
    x4 = reshape(x, (1,) + x.data.shape) if squeeze else x
    n, c, h, w = x4.data.shape
    c_out, c_k, kh, kw = kernels.data.shape
    if c_k != c:
        raise DimensionError(f"kernel channels {c_k} != input channels {c}")
    sh, sw = stride
    ph, pw = padding
    out_h = _conv_geometry(h, kh, sh, ph, "height")
    out_w = _conv_geometry(w, kw, sw, pw, "width")

    padded = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    padded[:, :, ph : ph + h, pw : pw + w] = x4.data
    colmat = _im2col(padded, kh, kw, sh, sw, out_h, out_w)
    kmat = kernels.data.reshape(c_out, c * kh * kw)
    out = (kmat @ colmat).reshape(c_out, n, out_h, out_w).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        dx = None
        if x4.requires_grad:
            dcol = kmat.T @ g2
            dpad = _col2im(dcol, n, c, h + 2 * ph, w + 2 * pw,
                           kh, kw, sh, sw, out_h, out_w)
            dx = dpad[:, :, ph : ph + h, pw : pw + w]
        dk = (g2 @ colmat.T).reshape(c_out, c, kh, kw) if kernels.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        if bias is None:
            return (dx, dk)
        return (dx, dk, db)

    parents = (x4, kernels) if bias is None else (x4, kernels, bias)
    result = _make(out, parents, vjp)
    return reshape(result, result.data.shape[1:]) if squeeze else result


def maxpool2d(x: Tensor, window: tuple[int, int],
              stride: Optional[tuple[int, int]] = None) -> Tensor:
    """Per-window maximum over (N,C,H,W); gradient goes to the first argmax."""
    squeeze = x.data.ndim == 3
    x4 = reshape(x, (1,) + x.data.shape) if squeeze else x
    n, c, h, w = x4.data.shape
    wh, ww = window
    sh, sw = stride if stride is not None else window
    out_h = _conv_geometry(h, wh, sh, 0, "height")
    out_w = _conv_geometry(w, ww, sw, 0, "width")

    offsets = [(i, j) for i in range(wh) for j in range(ww)]
    stacked = np.stack(
        [x4.data[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw]
         for i, j in offsets],
        axis=-1,
    )
    # np.argmax picks the first maximum, which is exactly the scan-order rule.
    winner = np.argmax(stacked, axis=-1)
    out = np.take_along_axis(stacked, winner[..., None], axis=-1)[..., 0]

    def vjp(g):
        dx = np.zeros_like(x4.data)
        for k, (i, j) in enumerate(offsets):
            dx[:, :, i : i + sh * out_h : sh, j : j + sw * out_w : sw] += np.where(
                winner == k, g, 0.0
            )
        return (dx,)

    result = _make(out, (x4,), vjp)
    return reshape(result, result.data.shape[1:]) if squeeze else result


# -- normalization and softmax --------------------------------------------------


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of (N,C,H,W) activations.

    Training mode normalizes with batch statistics and folds them into the
    caller-owned running buffers (in place); inference mode reads the buffers.
    """
    n, c, h, w = x.data.shape
    axes = (0, 2, 3)
    count = n * h * w
    if training:
        if count < 2:
            raise DimensionError("batch norm needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        dbeta = g.sum(axis=axes) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                sum_dxhat = dxhat.sum(axis=axes)
                sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)
                dx = (inv_std[None, :, None, None] / count) * (
                    count * dxhat
                    - sum_dxhat[None, :, None, None]
                    - xhat * sum_dxhat_xhat[None, :, None, None]
                )
            else:
                dx = dxhat * inv_std[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, computed with max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), vjp)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    """Plain-array stable log-softmax along the last axis (no graph)."""
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
