"""Differentiable image layers: convolution, pooling, up-convolution, batch
normalization, activations, dropout, additive Gaussian noise, channel concat.

All image tensors are NCHW.  Convolution is cross-correlation computed by a
strided window view contracted with the kernel (one GEMM); its input gradient
is a kh*kw scatter loop.  Up-convolution is the exact adjoint of that input
gradient, so an up-convolution and a convolution built on the same kernel
array satisfy <upconv(x), y> == <x, conv_backward_input(y)>.  For that reason
an up-convolution kernel is read as (in_channels, out_channels, kH, kW).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError, ShapeError
from .tensor import Op, Rng, Tensor, record


@dataclass
class Conv2dParams:
    """Kernel, bias and geometry for conv2d (weight laid out out x in x kH x kW)
    or upconv2d (same buffer read transposed: in x out x kH x kW)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if len(self.weight.shape) != 4:
            raise ShapeError(f"conv weight must be rank 4, got {self.weight.shape}")
        if len(self.bias.shape) != 1:
            raise ShapeError(f"conv bias must be rank 1, got {self.bias.shape}")
        kh, kw = self.weight.shape[2:]
        if kh < 1 or kw < 1:
            raise ParameterError(f"kernel extents must be >= 1, got {kh}x{kw}")
        if self.stride < 1:
            raise ParameterError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ParameterError(f"padding must be >= 0, got {self.padding}")


@dataclass
class BatchNormParams:
    """Per-channel affine parameters plus running statistics.

    ``mode`` selects batch statistics (train) or running statistics (eval);
    callers may override it per invocation without touching the stored flag.
    """

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        c = self.scale.shape
        if len(c) != 1 or self.shift.shape != c:
            raise ShapeError(f"scale/shift must be rank 1 and equal: {c} vs {self.shift.shape}")
        if self.running_mean.shape != c or self.running_var.shape != c:
            raise ShapeError("running statistics must match the channel count")
        if np.any(self.running_var < 0):
            raise ParameterError("running_var must be non-negative")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.mode not in ("train", "eval"):
            raise ParameterError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @classmethod
    def initial(cls, channels: int, dtype: str = "f32", momentum: float = 0.99,
                epsilon: float = 1e-5) -> "BatchNormParams":
        npdt = np.float32 if dtype == "f32" else np.float64
        return cls(
            scale=Tensor(np.ones(channels, npdt), requires_grad=True),
            shift=Tensor(np.zeros(channels, npdt), requires_grad=True),
            running_mean=np.zeros(channels, npdt),
            running_var=np.ones(channels, npdt),
            momentum=momentum,
            epsilon=epsilon,
        )


def _require_nchw(x: Tensor, what: str) -> tuple:
    if len(x.shape) != 4:
        raise ShapeError(f"{what} expects an NCHW tensor, got shape {x.shape}")
    return x.shape


def _windows(v: np.ndarray, kh: int, kw: int, stride: int):
    """Read-only (N, C, Ho, Wo, kh, kw) sliding view over a padded NCHW array."""
    n, c, hp, wp = v.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = v.strides
    shape = (n, c, ho, wo, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(v, shape, strides, writeable=False), ho, wo


def _scatter_conv_input_grad(g, weight, src_shape, kh, kw, stride):
    """Adjoint of the window contraction: accumulate g back onto the padded input."""
    out = np.zeros(src_shape, dtype=g.dtype)
    n, _, h, w = g.shape
    for i in range(kh):
        for j in range(kw):
            patch = np.tensordot(g, weight[:, :, i, j], axes=[(1,), (0,)])
            out[:, :, i : i + h * stride : stride, j : j + w * stride : stride] += (
                patch.transpose(0, 3, 1, 2)
            )
    return out


class Conv2dOp(Op):
    def __init__(self, inputs, padded, stride, padding, hw):
        super().__init__(inputs)
        self.padded = padded
        self.stride = stride
        self.padding = padding
        self.hw = hw

    def backward(self, grad):
        x, weight, bias = self.inputs
        kh, kw = weight.shape[2:]
        win, _, _ = _windows(self.padded, kh, kw, self.stride)
        dbias = grad.sum(axis=(0, 2, 3))
        dweight = np.tensordot(grad, win, axes=[(0, 2, 3), (0, 2, 3)])
        dpadded = _scatter_conv_input_grad(grad, weight.values, self.padded.shape,
                                           kh, kw, self.stride)
        p = self.padding
        h, w = self.hw
        dx = dpadded[:, :, p : p + h, p : p + w]
        return np.ascontiguousarray(dx), dweight, dbias


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlate an NCHW tensor with p.weight (out x in x kH x kW)."""
    n, c, h, w = _require_nchw(x, "conv2d")
    out_ch, in_ch, kh, kw = p.weight.shape
    if c != in_ch:
        raise ShapeError(f"conv2d input has {c} channels, kernel expects {in_ch}")
    if p.bias.shape != (out_ch,):
        raise ShapeError(f"bias shape {p.bias.shape} != ({out_ch},)")
    if h + 2 * p.padding < kh or w + 2 * p.padding < kw:
        raise ShapeError(f"padded extents {h + 2 * p.padding}x{w + 2 * p.padding} "
                         f"smaller than kernel {kh}x{kw}")
    if (h + 2 * p.padding - kh) % p.stride or (w + 2 * p.padding - kw) % p.stride:
        raise ShapeError("stride does not divide the padded extents evenly")
    padded = x.values
    if p.padding:
        pads = ((0, 0), (0, 0), (p.padding, p.padding), (p.padding, p.padding))
        padded = np.pad(x.values, pads)
    win, _, _ = _windows(padded, kh, kw, p.stride)
    out = np.tensordot(win, p.weight.values, axes=[(1, 4, 5), (1, 2, 3)])
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += p.bias.values[None, :, None, None]
    return record(out, (x, p.weight, p.bias), Conv2dOp, padded, p.stride, p.padding, (h, w))


class MaxPool2dOp(Op):
    def __init__(self, inputs, arg, window):
        super().__init__(inputs)
        self.arg = arg
        self.window = window

    def backward(self, grad):
        n, c, ho, wo = grad.shape
        k = self.window
        blocks = np.zeros((n, c, ho, wo, k * k), dtype=grad.dtype)
        np.put_along_axis(blocks, self.arg[..., None], grad[..., None], axis=4)
        blocks = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(blocks.reshape(n, c, ho * k, wo * k)),)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; backward routes to the saved arg-max."""
    if window != stride:
        raise ParameterError("only window == stride pooling is supported")
    if window < 1:
        raise ParameterError(f"window must be >= 1, got {window}")
    n, c, h, w = _require_nchw(x, "maxpool2d")
    if h % window or w % window:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by window {window}")
    k = window
    blocks = x.values.reshape(n, c, h // k, k, w // k, k)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    arg = blocks.argmax(axis=4)
    out = np.take_along_axis(blocks, arg[..., None], axis=4)[..., 0]
    return record(np.ascontiguousarray(out), (x,), MaxPool2dOp, arg, k)


class UpConv2dOp(Op):
    def __init__(self, inputs, stride):
        super().__init__(inputs)
        self.stride = stride

    def backward(self, grad):
        x, weight, bias = self.inputs
        kh, kw = weight.shape[2:]
        dbias = grad.sum(axis=(0, 2, 3))
        win, _, _ = _windows(grad, kh, kw, self.stride)
        dx = np.tensordot(win, weight.values, axes=[(1, 4, 5), (1, 2, 3)])
        dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        dweight = np.tensordot(x.values, win, axes=[(0, 2, 3), (0, 2, 3)])
        return dx, dweight, dbias


def upconv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Transposed convolution; p.weight is read as (in, out, kH, kW)."""
    n, c, h, w = _require_nchw(x, "upconv2d")
    in_ch, out_ch, kh, kw = p.weight.shape
    if c != in_ch:
        raise ShapeError(f"upconv2d input has {c} channels, kernel expects {in_ch}")
    if p.bias.shape != (out_ch,):
        raise ShapeError(f"bias shape {p.bias.shape} != ({out_ch},)")
    if p.padding != 0:
        raise ParameterError("upconv2d supports zero padding only")
    s = p.stride
    out_shape = (n, out_ch, (h - 1) * s + kh, (w - 1) * s + kw)
    out = _scatter_conv_input_grad(x.values, p.weight.values, out_shape, kh, kw, s)
    out += p.bias.values[None, :, None, None]
    return record(out, (x, p.weight, p.bias), UpConv2dOp, s)


class BatchNormTrainOp(Op):
    def __init__(self, inputs, xhat, inv_std, m):
        super().__init__(inputs)
        self.xhat = xhat
        self.inv_std = inv_std
        self.m = m

    def backward(self, grad):
        _, scale, _ = self.inputs
        dshift = grad.sum(axis=(0, 2, 3))
        dscale = (grad * self.xhat).sum(axis=(0, 2, 3))
        dxhat = grad * scale.values[None, :, None, None]
        # dvar's Sum(x - mu) cross term is identically zero and dropped.
        s = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sx = (dxhat * self.xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = self.inv_std * (dxhat - s / self.m - self.xhat * sx / self.m)
        return dx, dscale, dshift


class BatchNormEvalOp(Op):
    def __init__(self, inputs, xhat, inv_std):
        super().__init__(inputs)
        self.xhat = xhat
        self.inv_std = inv_std

    def backward(self, grad):
        _, scale, _ = self.inputs
        dshift = grad.sum(axis=(0, 2, 3))
        dscale = (grad * self.xhat).sum(axis=(0, 2, 3))
        dx = grad * (scale.values[None, :, None, None] * self.inv_std)
        return dx, dscale, dshift


def batchnorm(x: Tensor, p: BatchNormParams, mode: str | None = None) -> Tensor:
    """Normalize per channel; train mode also folds batch stats into the
    running statistics with p.momentum."""
    mode = p.mode if mode is None else mode
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = _require_nchw(x, "batchnorm")
    if p.scale.shape != (c,):
        raise ShapeError(f"batchnorm expects {p.scale.shape[0]} channels, got {c}")
    v = x.values
    if mode == "train":
        mean = v.mean(axis=(0, 2, 3), keepdims=True)
        var = ((v - mean) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (v - mean) * inv_std
        mom = p.momentum
        p.running_mean[:] = mom * p.running_mean + (1.0 - mom) * mean.reshape(-1)
        p.running_var[:] = mom * p.running_var + (1.0 - mom) * var.reshape(-1)
        out = p.scale.values[None, :, None, None] * xhat + p.shift.values[None, :, None, None]
        return record(out, (x, p.scale, p.shift), BatchNormTrainOp, xhat, inv_std, n * h * w)
    inv_std = (1.0 / np.sqrt(p.running_var + p.epsilon))[None, :, None, None].astype(v.dtype)
    xhat = (v - p.running_mean[None, :, None, None]) * inv_std
    out = p.scale.values[None, :, None, None] * xhat + p.shift.values[None, :, None, None]
    return record(out, (x, p.scale, p.shift), BatchNormEvalOp, xhat, inv_std)


class ReluOp(Op):
    def __init__(self, inputs, mask):
        super().__init__(inputs)
        self.mask = mask

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    # np.maximum rather than where: NaN must survive so divergence is seen
    return record(np.maximum(x.values, 0), (x,), ReluOp, mask)


class SigmoidOp(Op):
    def __init__(self, inputs, out):
        super().__init__(inputs)
        self.out = out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return record(out, (x,), SigmoidOp, out)


class ScaleMaskOp(Op):  # shared by dropout backward
    def __init__(self, inputs, mask):
        super().__init__(inputs)
        self.mask = mask

    def backward(self, grad):
        return (grad * self.mask,)


def dropout(x: Tensor, rate: float, rng: Rng, mode: str) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate); eval is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = rng.uniform(x.shape, 0.0, 1.0, dtype="f64") >= rate
    mask = (keep / (1.0 - rate)).astype(x.values.dtype)
    return record(x.values * mask, (x,), ScaleMaskOp, mask)


class AddConstOp(Op):  # noise is constant w.r.t. the input
    def backward(self, grad):
        return (grad,)


def gaussian_noise(x: Tensor, stddev: float, rng: Rng, mode: str) -> Tensor:
    """Additive zero-mean Gaussian perturbation in train mode."""
    if stddev < 0:
        raise ParameterError(f"stddev must be >= 0, got {stddev}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or stddev == 0.0:
        return x
    noise = rng.normal(x.shape, stddev, dtype=x.dtype)
    return record(x.values + noise, (x,), AddConstOp)


class ConcatChannelsOp(Op):
    def backward(self, grad):
        ca = self.inputs[0].shape[1]
        return (np.ascontiguousarray(grad[:, :ca]), np.ascontiguousarray(grad[:, ca:]))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    sa = _require_nchw(a, "concat_channels")
    sb = _require_nchw(b, "concat_channels")
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeError(f"batch/spatial extents must match: {sa} vs {sb}")
    if a.values.dtype != b.values.dtype:
        raise ContractError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return record(np.concatenate([a.values, b.values], axis=1), (a, b), ConcatChannelsOp)


class NarrowOp(Op):
    def __init__(self, inputs, axis, start, length):
        super().__init__(inputs)
        self.axis = axis
        self.start = start
        self.length = length

    def backward(self, grad):
        out = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        sl = [slice(None)] * out.ndim
        sl[self.axis] = slice(self.start, self.start + self.length)
        out[tuple(sl)] = grad
        return (out,)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads back."""
    rank = len(x.shape)
    if not -rank <= axis < rank:
        raise ShapeError(f"axis {axis} invalid for rank {rank}")
    axis %= rank
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(f"slice [{start}, {start + length}) exceeds extent {x.shape[axis]}")
    sl = [slice(None)] * rank
    sl[axis] = slice(start, start + length)
    return record(np.ascontiguousarray(x.values[tuple(sl)]), (x,), NarrowOp, axis, start, length)
