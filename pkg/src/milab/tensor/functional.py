"""Composite operations built from the primitives in :mod:`core`."""

from __future__ import annotations

import numpy as np

from .core import (
    ShapeError,
    Tensor,
    as_tensor,
    col2im,
    concat,
    getitem,
    im2col,
    log,
    exp,
    matmul,
    relu,
    reshape,
    tabs,
    power,
    tmax,
    transpose,
    tsum,
)

__all__ = [
    "linear",
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "nchw_to_nhwc",
    "nhwc_to_nchw",
    "logsumexp",
    "log_softmax",
    "softmax",
    "cross_entropy",
    "one_hot",
    "l2_norm",
    "append_ones",
    "softplus",
]


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = matmul(x, transpose(weight))
    return y if bias is None else y + bias


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Convolution on NHWC input; weight shaped [kh, kw, C_in, C_out]."""
    x = as_tensor(x)
    kh, kw, c, f = weight.shape
    if x.ndim != 4 or x.shape[3] != c:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {weight.shape}")
    n, h, w, _ = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = im2col(x, kh, kw, stride, pad)
    y = reshape(matmul(cols, reshape(weight, (kh * kw * c, f))), (n, oh, ow, f))
    return y if bias is None else y + bias


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0, output_padding=0
) -> Tensor:
    """Transposed convolution on NHWC input; weight shaped [C_in, kh, kw, C_out]."""
    x = as_tensor(x)
    cin, kh, kw, cout = weight.shape
    if x.ndim != 4 or x.shape[3] != cin:
        raise ShapeError(f"conv_transpose2d: input {x.shape} does not match weight {weight.shape}")
    if output_padding >= stride:
        raise ShapeError("conv_transpose2d: output_padding must be smaller than stride")
    n, h, w, _ = x.shape
    oh = (h - 1) * stride - 2 * pad + kh + output_padding
    ow = (w - 1) * stride - 2 * pad + kw + output_padding
    cols = matmul(reshape(x, (n * h * w, cin)), reshape(weight, (cin, kh * kw * cout)))
    y = col2im(cols, (n, oh, ow, cout), kh, kw, stride, pad)
    return y if bias is None else y + bias


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling on NHWC input; leftover rows/cols are dropped."""
    n, h, w, c = x.shape
    oh, ow = h // k, w // k
    if oh == 0 or ow == 0:
        raise ShapeError(f"max_pool2d: window {k} larger than input {x.shape}")
    if (oh * k, ow * k) != (h, w):
        x = getitem(x, (slice(None), slice(0, oh * k), slice(0, ow * k)))
    return tmax(reshape(x, (n, oh, k, ow, k, c)), axis=(2, 4))


def nchw_to_nhwc(x: Tensor) -> Tensor:
    return transpose(x, (0, 2, 3, 1))


def nhwc_to_nchw(x: Tensor) -> Tensor:
    return transpose(x, (0, 3, 1, 2))


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    out = log(tsum(exp(x - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [N, K] logits, got {logits.shape}")
    per_sample = -tsum(log_softmax(logits) * one_hot(labels, logits.shape[1]), axis=1)
    if reduction == "none":
        return per_sample
    if reduction == "sum":
        return tsum(per_sample)
    return per_sample.mean()


def l2_norm(x: Tensor, axis=-1, eps: float = 0.0) -> Tensor:
    return power(tsum(x * x, axis=axis) + eps, 0.5)


def append_ones(p: Tensor) -> Tensor:
    """[p; 1] along the last axis."""
    ones = np.ones(p.shape[:-1] + (1,))
    return concat([p, ones], axis=-1)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) without overflow."""
    return relu(x) + log(1.0 + exp(-tabs(x)))
