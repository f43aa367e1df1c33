"""Deterministic and moment-propagating layer kernels.

Every kernel takes a single activation (flat ``(D,)`` or ``(C, H, W)``) or a
batch of them with one extra leading axis.  Since activations are 1-D or
3-D, the rank tells the two layouts apart.  Moment kernels work on
:class:`~stochff.tensorcore.MomentTensor`; backward kernels return input
gradients, plus parameter gradients where the layer has parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gaussmath import DEFAULT_REG, RegularizationConstants, censored_relu_arrays, pairwise_max_arrays
from .tensorcore import MomentTensor, ShapeError


# -- layer descriptors ------------------------------------------------------

@dataclass
class Conv:
    weights: np.ndarray  # (out_ch, in_ch, kH, kW)
    bias: np.ndarray  # (out_ch,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ShapeError(f"conv weights must be (out, in, kH, kW), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("conv bias length must equal out_ch")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


@dataclass
class Dense:
    weights: np.ndarray  # (units, in_features)
    bias: np.ndarray  # (units,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("dense weights must be (units, in) with bias of length units")


@dataclass
class ReLU:
    theta: float = 0.0


@dataclass
class MaxPool:
    window: tuple[int, int] = (2, 2)
    stride: int = 2
    sorted_mode: bool = True

    def __post_init__(self):
        self.window = tuple(int(w) for w in self.window)
        if len(self.window) != 2 or min(self.window) < 1 or self.stride < 1:
            raise ValueError("pool window and stride must be positive")


@dataclass
class AvgPool:
    window: tuple[int, int] = (2, 2)
    stride: int = 2

    def __post_init__(self):
        self.window = tuple(int(w) for w in self.window)
        if len(self.window) != 2 or min(self.window) < 1 or self.stride < 1:
            raise ValueError("pool window and stride must be positive")


@dataclass
class BatchNorm:
    """Evaluation-phase batch norm: a fixed per-channel affine map."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps_bn: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.gamma.shape
        if len(n) != 1 or any(getattr(self, k).shape != n for k in ("beta", "running_mean", "running_var")):
            raise ShapeError("batch-norm parameter arrays must share one channel count")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")
        if not self.eps_bn >= 0:
            raise ValueError("eps_bn must be nonnegative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale(self) -> np.ndarray:
        return self.gamma / np.sqrt(self.running_var + self.eps_bn)


@dataclass
class Dropout:
    rate: float = 0.5


@dataclass
class Flatten:
    pass


@dataclass
class Softmax:
    pass


LAYER_TYPES = (Conv, Dense, ReLU, MaxPool, AvgPool, BatchNorm, Dropout, Flatten, Softmax)


def output_shape(layer, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape of one activation after ``layer``; raises ShapeError if incompatible."""
    if isinstance(layer, Conv):
        o, c, kh, kw = layer.weights.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise ShapeError(f"conv expects ({c}, H, W) input, got {in_shape}")
        h = (in_shape[1] + 2 * layer.padding - kh) // layer.stride + 1
        w = (in_shape[2] + 2 * layer.padding - kw) // layer.stride + 1
        if in_shape[1] + 2 * layer.padding < kh or in_shape[2] + 2 * layer.padding < kw:
            raise ShapeError(f"conv kernel {kh}x{kw} larger than padded input {in_shape}")
        return (o, h, w)
    if isinstance(layer, (MaxPool, AvgPool)):
        ph, pw = layer.window
        if len(in_shape) != 3 or in_shape[1] < ph or in_shape[2] < pw:
            raise ShapeError(f"pool window {layer.window} does not fit input {in_shape}")
        return (in_shape[0], (in_shape[1] - ph) // layer.stride + 1, (in_shape[2] - pw) // layer.stride + 1)
    if isinstance(layer, Dense):
        if len(in_shape) != 1 or in_shape[0] != layer.weights.shape[1]:
            raise ShapeError(f"dense expects ({layer.weights.shape[1]},) input, got {in_shape}")
        return (layer.weights.shape[0],)
    if isinstance(layer, BatchNorm):
        if in_shape[0] != layer.channels:
            raise ShapeError(f"batch norm has {layer.channels} channels, input is {in_shape}")
        return in_shape
    if isinstance(layer, Flatten):
        return (int(np.prod(in_shape)),)
    if isinstance(layer, Softmax):
        if len(in_shape) != 1:
            raise ShapeError(f"softmax expects flat input, got {in_shape}")
        return in_shape
    if isinstance(layer, (ReLU, Dropout)):
        return in_shape
    raise TypeError(f"unknown layer {layer!r}")


# -- convolution ------------------------------------------------------------

def _pad(x, pad):
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths)


def _windows(x, kh, kw, stride):
    # (..., C, H', W', kh, kw) view, no copy
    return sliding_window_view(x, (kh, kw), axis=(-2, -1))[..., ::stride, ::stride, :, :]


def _check_conv_input(x, conv: Conv):
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv input must be (C, H, W) or batched, got {x.shape}")
    output_shape(conv, x.shape[-3:])


def _correlate(x, weights, bias, stride, padding):
    kh, kw = weights.shape[2:]
    win = _windows(_pad(x, padding), kh, kw, stride)
    y = np.tensordot(win, weights, axes=([-5, -2, -1], [1, 2, 3]))
    y = np.moveaxis(y, -1, -3)
    if bias is not None:
        y = y + bias[:, None, None]
    return np.ascontiguousarray(y)


def conv_forward_det(x: np.ndarray, conv: Conv) -> np.ndarray:
    """Zero-padded cross-correlation."""
    _check_conv_input(x, conv)
    return _correlate(x, conv.weights, conv.bias, conv.stride, conv.padding)


def conv_forward_moments(x: MomentTensor, conv: Conv) -> MomentTensor:
    """Mean through the layer as usual; variance through squared weights, no bias."""
    _check_conv_input(x.mean, conv)
    mean = _correlate(x.mean, conv.weights, conv.bias, conv.stride, conv.padding)
    var = _correlate(x.variance, conv.weights**2, None, conv.stride, conv.padding)
    return MomentTensor(mean, np.maximum(var, 0.0))


def conv_backward(dy: np.ndarray, x: np.ndarray, conv: Conv):
    """Return ``(dx, dweights, dbias)`` for a conv layer evaluated at ``x``."""
    nb = dy.ndim - 3
    batch = list(range(nb))
    s, pad = conv.stride, conv.padding
    kh, kw = conv.weights.shape[2:]
    xp = _pad(x, pad)
    win = _windows(xp, kh, kw, s)
    db = dy.sum(axis=tuple(batch) + (nb + 1, nb + 2))
    dw = np.tensordot(dy, win, axes=(batch + [nb + 1, nb + 2], batch + [nb + 1, nb + 2]))
    cols = np.tensordot(dy, conv.weights, axes=([nb], [0]))  # (..., H', W', C, kh, kw)
    cols = np.moveaxis(cols, -3, -5)  # (..., C, H', W', kh, kw)
    ho, wo = dy.shape[-2:]
    dxp = np.zeros(xp.shape)
    for i in range(kh):
        for j in range(kw):
            dxp[..., i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[..., i, j]
    if pad:
        dxp = dxp[..., pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw, db


# -- dense ------------------------------------------------------------------

def dense_forward_det(x: np.ndarray, dense: Dense) -> np.ndarray:
    if x.shape[-1] != dense.weights.shape[1] or x.ndim > 2:
        raise ShapeError(f"dense expects ({dense.weights.shape[1]},) input, got {x.shape}")
    return x @ dense.weights.T + dense.bias


def dense_forward_moments(x: MomentTensor, dense: Dense) -> MomentTensor:
    mean = dense_forward_det(x.mean, dense)
    var = x.variance @ (dense.weights**2).T
    return MomentTensor(mean, np.maximum(var, 0.0))


def dense_backward(dy: np.ndarray, x: np.ndarray, dense: Dense):
    dx = dy @ dense.weights
    if dy.ndim == 1:
        return dx, np.outer(dy, x), dy.copy()
    return dx, dy.T @ x, dy.sum(axis=0)


# -- ReLU ------------------------------------------------------------------

def relu_forward_det(x: np.ndarray, theta: float = 0.0) -> np.ndarray:
    return np.maximum(x, theta)


def relu_forward_moments(x: MomentTensor, theta: float = 0.0,
                         reg: RegularizationConstants = DEFAULT_REG) -> MomentTensor:
    mean, var = censored_relu_arrays(x.mean, x.variance, theta, reg)
    return MomentTensor(mean, var)


def relu_backward(dy: np.ndarray, x: np.ndarray, theta: float = 0.0) -> np.ndarray:
    return dy * (x > theta)


# -- max pooling ------------------------------------------------------------

def pool_windows(x, pool) -> np.ndarray:
    """Flattened pooling windows, shape ``(..., C, H', W', pH * pW)``."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"pool input must be (C, H, W) or batched, got {x.shape}")
    output_shape(pool, x.shape[-3:])
    ph, pw = pool.window
    win = _windows(x, ph, pw, pool.stride)
    return win.reshape(win.shape[:-2] + (ph * pw,))


def maxpool_forward_det(x: np.ndarray, pool: MaxPool):
    """Window maxima plus the flat (per-sample) input index of each winner.

    Ties go to the first element in row-major scan order.
    """
    win = pool_windows(x, pool)
    k = np.argmax(win, axis=-1)
    y = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    c, h, w = x.shape[-3:]
    ho, wo = y.shape[-2:]
    ph, pw = pool.window
    rows = np.arange(ho)[:, None] * pool.stride + k // pw
    cols = np.arange(wo)[None, :] * pool.stride + k % pw
    chan = np.arange(c)[:, None, None]
    index = chan * (h * w) + rows * w + cols
    return np.ascontiguousarray(y), index


def maxpool_forward_moments(x: MomentTensor, pool: MaxPool,
                            reg: RegularizationConstants = DEFAULT_REG) -> MomentTensor:
    """Fold the pairwise-max moment rule over each window.

    With ``pool.sorted_mode`` the window is first stably sorted by ascending
    mean; otherwise it is folded in row-major scan order.
    """
    means = pool_windows(x.mean, pool)
    variances = pool_windows(x.variance, pool)
    if pool.sorted_mode:
        order = np.argsort(means, axis=-1, kind="stable")
        means = np.take_along_axis(means, order, axis=-1)
        variances = np.take_along_axis(variances, order, axis=-1)
    m, v = means[..., 0], variances[..., 0]
    for k in range(1, means.shape[-1]):
        m, v = pairwise_max_arrays(m, v, means[..., k], variances[..., k], reg)
    return MomentTensor(np.ascontiguousarray(m), np.ascontiguousarray(v))


def maxpool_backward(dy: np.ndarray, index: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    """Route ``dy`` back to the argmax positions recorded by the forward pass."""
    size = int(np.prod(in_shape))
    if dy.ndim == 3:
        return np.bincount(index.ravel(), weights=dy.ravel(), minlength=size).reshape(in_shape)
    n = dy.shape[0]
    offsets = (np.arange(n) * size)[:, None, None, None]
    flat = np.bincount((index + offsets).ravel(), weights=dy.ravel(), minlength=n * size)
    return flat.reshape((n,) + tuple(in_shape))


# -- average pooling --------------------------------------------------------

def _avg_kernel(pool: AvgPool) -> Conv:
    ph, pw = pool.window
    return Conv(np.full((1, 1, ph, pw), 1.0 / (ph * pw)), np.zeros(1), stride=pool.stride)


def avgpool_forward_det(x: np.ndarray, pool: AvgPool) -> np.ndarray:
    pool_windows(x, pool)
    kernel = _avg_kernel(pool)
    chans = [conv_forward_det(x[..., c:c + 1, :, :], kernel) for c in range(x.shape[-3])]
    return np.concatenate(chans, axis=-3)


def avgpool_forward_moments(x: MomentTensor, pool: AvgPool) -> MomentTensor:
    """Per-channel convolution with constant ``1/n`` weights and zero bias."""
    pool_windows(x.mean, pool)
    kernel = _avg_kernel(pool)
    outs = [conv_forward_moments(MomentTensor(x.mean[..., c:c + 1, :, :], x.variance[..., c:c + 1, :, :]), kernel)
            for c in range(x.shape[-3])]
    return MomentTensor(np.concatenate([o.mean for o in outs], axis=-3),
                        np.concatenate([o.variance for o in outs], axis=-3))


def avgpool_backward(dy: np.ndarray, x: np.ndarray, pool: AvgPool) -> np.ndarray:
    kernel = _avg_kernel(pool)
    chans = [conv_backward(dy[..., c:c + 1, :, :], x[..., c:c + 1, :, :], kernel)[0]
             for c in range(x.shape[-3])]
    return np.concatenate(chans, axis=-3)


# -- batch norm -------------------------------------------------------------

def _per_channel(values, ndim):
    # spatial activations are 3-D (4-D batched); flat are 1-D (2-D batched)
    return values[:, None, None] if ndim in (3, 4) else values


def _check_bn(x, bn: BatchNorm):
    axis = -3 if x.ndim in (3, 4) else -1
    if x.shape[axis] != bn.channels:
        raise ShapeError(f"batch norm has {bn.channels} channels, input is {x.shape}")


def batchnorm_forward_det(x: np.ndarray, bn: BatchNorm) -> np.ndarray:
    _check_bn(x, bn)
    s = _per_channel(bn.scale(), x.ndim)
    return s * (x - _per_channel(bn.running_mean, x.ndim)) + _per_channel(bn.beta, x.ndim)


def batchnorm_forward_moments(x: MomentTensor, bn: BatchNorm) -> MomentTensor:
    mean = batchnorm_forward_det(x.mean, bn)
    s = _per_channel(bn.scale(), x.mean.ndim)
    return MomentTensor(mean, s * s * x.variance)


def batchnorm_backward(dy: np.ndarray, x: np.ndarray, bn: BatchNorm):
    """Return ``(dx, dgamma, dbeta)``; running statistics are constants."""
    nd = x.ndim
    s = bn.scale()
    dx = dy * _per_channel(s, nd)
    xhat = (x - _per_channel(bn.running_mean, nd)) / _per_channel(np.sqrt(bn.running_var + bn.eps_bn), nd)
    axes = tuple(i for i in range(nd) if i != (nd - 3 if nd in (3, 4) else nd - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


# -- dropout, softmax -------------------------------------------------------

def dropout_forward_moments(x: MomentTensor) -> MomentTensor:
    """Identity: the engine is inference-only."""
    return x


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_forward(x) -> np.ndarray:
    """Softmax of the means; variances are dropped."""
    mean = x.mean if isinstance(x, MomentTensor) else np.asarray(x, dtype=np.float64)
    return softmax(mean)
