"""Float64 tensors with a reverse-mode gradient tape.

Every primitive records a vector-Jacobian product written in terms of other
tensor operations, so gradients are themselves differentiable when a tape
computes them with ``create_graph=True`` (used for the WGAN gradient penalty).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive's signature."""


class NumericError(FloatingPointError):
    """A computation produced non-finite values."""


def _active_tapes() -> list:
    tapes = getattr(_state, "tapes", None)
    if tapes is None:
        tapes = _state.tapes = []
    return tapes


def _paused() -> int:
    return getattr(_state, "paused", 0)


@contextmanager
def no_grad():
    """Suspend recording on every tape owned by this thread."""
    _state.paused = _paused() + 1
    try:
        yield
    finally:
        _state.paused -= 1


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms --------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


def _emit(op: str, data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _paused():
        return out
    tapes = _active_tapes()
    if tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, out, inputs, vjp)
        for tape in tapes:
            tape._nodes.append(node)
    return out


class Tape:
    """Append-only record of primitives executed while the tape is active.

    Use as a context manager. Tapes nest; an operation is recorded on every
    active tape of the current thread.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc):
        tapes = _active_tapes()
        if self in tapes:
            tapes.remove(self)
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self._nodes]

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        create_graph: bool = False,
        output_grad: Tensor | None = None,
    ) -> list[Tensor]:
        """Gradients of ``target`` with respect to each tensor in ``sources``.

        Sources that do not influence the target get a zero tensor.
        """
        grads = self._run(target, create_graph, output_grad)
        return [
            grads[id(s)] if id(s) in grads else Tensor(np.zeros(s.shape)) for s in sources
        ]

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Gradients for every requires_grad leaf reachable from ``loss``."""
        produced = {id(n.out) for n in self._nodes}
        leaves = {}
        for node in self._nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        grads = self._run(loss, False, None)
        return {t: grads[i] for i, t in leaves.items() if i in grads}

    def _run(self, target, create_graph, output_grad) -> dict[int, Tensor]:
        if output_grad is None:
            if target.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {target.shape}")
            output_grad = Tensor(np.ones(target.shape))
        elif output_grad.shape != target.shape:
            raise ShapeError(
                f"output_grad shape {output_grad.shape} != target shape {target.shape}"
            )
        if not target.requires_grad:
            raise ValueError("target is not on the tape (no input requires grad)")

        tapes = _active_tapes()
        was_active = self in tapes
        if was_active:
            tapes.remove(self)
        grads: dict[int, Tensor] = {id(target): output_grad}
        try:
            if create_graph:
                self._sweep(grads)
            else:
                with no_grad():
                    self._sweep(grads)
        finally:
            if was_active:
                tapes.append(self)
        return grads

    def _sweep(self, grads):
        for node in reversed(self._nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(
                        f"{node.op} backward produced {ig.shape} for input {inp.shape}"
                    )
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else add(prev, ig)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return reshape(tsum(g, axes, keepdims=True), shape) if axes else reshape(g, shape)


def _binary_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    return _emit(
        "add", a.data + b.data, (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    return _emit(
        "sub", a.data - b.data, (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(neg(g), b.shape) if b.requires_grad else None,
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    return _emit(
        "mul", a.data * b.data, (a, b),
        lambda g: (
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)

    def vjp(g):
        ga = div(g, b)
        return (
            _unbroadcast(ga, a.shape) if a.requires_grad else None,
            _unbroadcast(neg(mul(ga, div(a, b))), b.shape) if b.requires_grad else None,
        )

    return _emit("div", a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (neg(g),))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    c = float(exponent)
    return _emit(
        "pow", a.data**c, (a,), lambda g: (mul(g, mul(c, power(a, c - 1.0))),)
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_box = []

    def vjp(g):
        return (mul(g, out_box[0]),)

    out = _emit("exp", np.exp(a.data), (a,), vjp)
    out_box.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_box = []

    def vjp(g):
        y = out_box[0]
        return (mul(g, sub(1.0, mul(y, y))),)

    out = _emit("tanh", np.tanh(a.data), (a,), vjp)
    out_box.append(out)
    return out


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_box = []

    def vjp(g):
        y = out_box[0]
        return (mul(g, mul(y, sub(1.0, y))),)

    out = _emit("sigmoid", _sigmoid_np(a.data), (a,), vjp)
    out_box.append(out)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(DTYPE)
    return _emit("relu", a.data * mask, (a,), lambda g: (mul(g, mask),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _emit("leaky_relu", a.data * factor, (a,), lambda g: (mul(g, factor),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _emit("abs", np.abs(a.data), (a,), lambda g: (mul(g, sign),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(DTYPE)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, inside),))


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        return (
            _unbroadcast(matmul(g, _swap_last(b)), a.shape) if a.requires_grad else None,
            _unbroadcast(matmul(_swap_last(a), g), b.shape) if b.requires_grad else None,
        )

    return _emit("matmul", a.data @ b.data, (a, b), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kshape = _keep_shape(a.shape, axes)

    def vjp(g):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _emit("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kshape = _keep_shape(a.shape, axes)
    m = a.data.max(axis=axes, keepdims=True)
    hit = (a.data == m).astype(DTYPE)
    share = hit / hit.sum(axis=axes, keepdims=True)
    out = m if keepdims else m.reshape([s for i, s in enumerate(a.shape) if i not in axes])

    def vjp(g):
        return (mul(broadcast_to(reshape(g, kshape), a.shape), share),)

    return _emit("max", out, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _emit("broadcast_to", data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _emit("reshape", data, (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        "transpose", a.data.transpose(axes), (a,), lambda g: (transpose(g, inverse),)
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    return _emit(
        "getitem", a.data[index], (a,), lambda g: (embed(g, a.shape, index),)
    )


def embed(a, shape, index) -> Tensor:
    """Place ``a`` at ``index`` inside zeros of ``shape`` (adjoint of getitem)."""
    a = as_tensor(a)
    out = np.zeros(shape)
    if _is_basic_index(index):
        out[index] = a.data
    else:
        np.add.at(out, index, a.data)
    return _emit("embed", out, (a,), lambda g: (getitem(g, index),))


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    axis = axis % tensors[0].ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        pre = (slice(None),) * axis
        return tuple(
            getitem(g, pre + (slice(int(lo), int(hi)),)) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _emit("concat", data, tensors, vjp)


# ---------------------------------------------------------------------------
# patch extraction (the convolution workhorse)
# ---------------------------------------------------------------------------


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col_np(x, kh, kw, stride, pad):
    n, h, w, c = x.shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def _col2im_np(cols, image_shape, kh, kw, stride, pad):
    n, h, w, c = image_shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    g = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, :, i, j]
    if pad:
        out = np.ascontiguousarray(out[:, pad : pad + h, pad : pad + w])
    return out


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Patches of an NHWC image as rows: shape [N*OH*OW, kh*kw*C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"im2col: expected NHWC input, got shape {x.shape}")
    if _out_size(x.shape[1], kh, stride, pad) < 1 or _out_size(x.shape[2], kw, stride, pad) < 1:
        raise ShapeError(f"im2col: kernel {kh}x{kw} does not fit input {x.shape} with pad {pad}")
    shape = x.shape
    return _emit(
        "im2col",
        _im2col_np(x.data, kh, kw, stride, pad),
        (x,),
        lambda g: (col2im(g, shape, kh, kw, stride, pad),),
    )


def col2im(cols, image_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Scatter-add patch rows back into an NHWC image (adjoint of im2col)."""
    cols = as_tensor(cols)
    n, h, w, c = image_shape
    rows = n * _out_size(h, kh, stride, pad) * _out_size(w, kw, stride, pad)
    if cols.shape != (rows, kh * kw * c):
        raise ShapeError(
            f"col2im: got {cols.shape}, expected {(rows, kh * kw * c)} for image {tuple(image_shape)}"
        )
    return _emit(
        "col2im",
        _col2im_np(cols.data, image_shape, kh, kw, stride, pad),
        (cols,),
        lambda g: (im2col(g, kh, kw, stride, pad),),
    )


def check_finite(t: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"{what} is not finite")
    return t
