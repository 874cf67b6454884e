"""Differentiable network primitives on channels-last tensors.

Every function accepts ``H x W x C`` or ``N x H x W x C`` inputs and returns
the same rank. Convolutions are cross-correlations (no kernel flip) with
zero "same" padding of ``k // 2`` on each side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import kernels
from .tensor import Tensor, record, reshape

__all__ = [
    "ConvLayer",
    "DepthwiseConvLayer",
    "conv2d",
    "pointwise_conv",
    "depthwise_conv2d",
    "global_avg_pool",
    "upsample2x",
    "activation",
    "relu",
    "elu",
    "sigmoid",
    "softmax_channels",
    "channel_norm",
    "dropout",
]


@dataclass(frozen=True)
class ConvLayer:
    kernel: Tensor  # Kh x Kw x Cin x Cout
    bias: Optional[Tensor] = None  # Cout
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ValueError(f"conv kernel must be Kh x Kw x Cin x Cout, got {self.kernel.shape}")
        _check_geometry(self.kernel.shape[:2], self.stride, self.padding)
        if self.bias is not None and self.bias.shape != (self.kernel.shape[3],):
            raise ValueError(f"bias shape {self.bias.shape} does not match Cout={self.kernel.shape[3]}")


@dataclass(frozen=True)
class DepthwiseConvLayer:
    kernel: Tensor  # Kh x Kw x C
    bias: Optional[Tensor] = None  # C
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel.ndim != 3:
            raise ValueError(f"depthwise kernel must be Kh x Kw x C, got {self.kernel.shape}")
        _check_geometry(self.kernel.shape[:2], self.stride, self.padding)
        if self.bias is not None and self.bias.shape != (self.kernel.shape[2],):
            raise ValueError(f"bias shape {self.bias.shape} does not match C={self.kernel.shape[2]}")


def _check_geometry(ksize, stride, padding):
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if padding == "same" and any(k % 2 == 0 for k in ksize):
        raise ValueError(f"same padding needs odd kernel extents, got {tuple(ksize)}")


def _batched(x: Tensor):
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ValueError(f"expected H x W x C or N x H x W x C, got shape {x.shape}")


def _unbatch(y: Tensor, squeezed: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeezed else y


def _padded_geometry(h, w, kh, kw, stride, padding):
    ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    out_h = (h + 2 * ph - kh) // stride + 1
    out_w = (w + 2 * pw - kw) // stride + 1
    return ph, pw, out_h, out_w


def _pad(a: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return a
    return np.pad(a, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _record_conv(out, xb, kernel, bias, bwd):
    """Record a convolution whose optional bias is added in place."""
    if bias is None:
        return record(out, (xb, kernel), bwd)
    out += bias.data

    def bwd_with_bias(g):
        return (*bwd(g), g.sum(axis=(0, 1, 2)).astype(bias.dtype))

    return record(out, (xb, kernel, bias), bwd_with_bias)


def conv2d(x: Tensor, layer: ConvLayer) -> Tensor:
    """Standard 2-D convolution ``H x W x Cin -> H' x W' x Cout``."""
    xb, squeezed = _batched(x)
    kernel = layer.kernel
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = xb.shape
    if c != cin:
        raise ValueError(f"input has {c} channels but kernel expects {cin}")
    s = layer.stride
    ph, pw, oh, ow = _padded_geometry(h, w, kh, kw, s, layer.padding)
    wd = kernel.data

    if kh == 1 and kw == 1 and s == 1:
        x2 = xb.data.reshape(-1, cin)
        w2 = wd.reshape(cin, cout)
        out = (x2 @ w2).reshape(n, h, w, cout)

        def bwd(g):
            g2 = g.reshape(-1, cout)
            return (g2 @ w2.T).reshape(xb.shape), (x2.T @ g2).reshape(kernel.shape)
    else:
        xp = _pad(xb.data, ph, pw)
        span_h, span_w = s * (oh - 1) + 1, s * (ow - 1) + 1
        out = None
        for p in range(kh):
            for q in range(kw):
                term = np.matmul(xp[:, p:p + span_h:s, q:q + span_w:s, :], wd[p, q])
                out = term if out is None else out + term

        def bwd(g):
            dxp = np.zeros_like(xp)
            dw = np.empty_like(wd)
            for p in range(kh):
                for q in range(kw):
                    window = xp[:, p:p + span_h:s, q:q + span_w:s, :]
                    dw[p, q] = np.tensordot(window, g, axes=([0, 1, 2], [0, 1, 2]))
                    dxp[:, p:p + span_h:s, q:q + span_w:s, :] += np.matmul(g, wd[p, q].T)
            return dxp[:, ph:ph + h, pw:pw + w, :], dw

    return _unbatch(_record_conv(out, xb, kernel, layer.bias, bwd), squeezed)


def pointwise_conv(x: Tensor, layer: ConvLayer) -> Tensor:
    """1x1 convolution: a per-pixel linear map across channels."""
    if layer.kernel.shape[:2] != (1, 1):
        raise ValueError(f"pointwise convolution needs a 1x1 kernel, got {layer.kernel.shape[:2]}")
    return conv2d(x, layer)


def depthwise_conv2d(x: Tensor, layer: DepthwiseConvLayer) -> Tensor:
    """Per-channel spatial convolution; channels never mix."""
    xb, squeezed = _batched(x)
    kernel = layer.kernel
    kh, kw, kc = kernel.shape
    n, h, w, c = xb.shape
    if c != kc:
        raise ValueError(f"input has {c} channels but depthwise kernel has {kc}")
    s = layer.stride
    ph, pw, oh, ow = _padded_geometry(h, w, kh, kw, s, layer.padding)
    xp = np.ascontiguousarray(_pad(xb.data, ph, pw))
    kd = np.ascontiguousarray(kernel.data, dtype=xp.dtype)
    out = kernels.depthwise_forward(xp, kd, s, oh, ow)

    def bwd(g):
        dxp, dk_part = kernels.depthwise_backward(xp, kd, np.ascontiguousarray(g, dtype=xp.dtype), s)
        return dxp[:, ph:ph + h, pw:pw + w, :], dk_part.sum(axis=0).astype(kernel.dtype)

    return _unbatch(_record_conv(out, xb, kernel, layer.bias, bwd), squeezed)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: ``H x W x C -> 1 x 1 x C``."""
    xb, squeezed = _batched(x)
    n, h, w, c = xb.shape
    out = xb.data.mean(axis=(1, 2), keepdims=True, dtype=xb.dtype)
    scale = 1.0 / (h * w)

    def bwd(g):
        return (np.broadcast_to(g * scale, xb.shape).astype(xb.dtype),)

    return _unbatch(record(out, (xb,), bwd), squeezed)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2: each pixel becomes a 2x2 block."""
    xb, squeezed = _batched(x)
    n, h, w, c = xb.shape
    out = xb.data.repeat(2, axis=1).repeat(2, axis=2)

    def bwd(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _unbatch(record(out, (xb,), bwd), squeezed)


# --- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    xd = x.data
    gate = xd > 0
    return record(np.where(gate, xd, 0).astype(xd.dtype), (x,), lambda g: (g * gate,))


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    xd = x.data
    e = np.exp(np.minimum(xd, 0))  # also the derivative: exp(0) = 1 on the positive side
    out = np.where(xd > 0, xd, e - 1)
    return record(out, (x,), lambda g: (g * e,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    s = (0.5 * np.tanh(0.5 * xd) + 0.5).astype(xd.dtype)
    return record(s, (x,), lambda g: (g * s * (1 - s),))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the last (channel) axis at every pixel."""
    xd = x.data
    if xd.shape[-1] < 2:
        raise ValueError("softmax over channels needs at least 2 channels")
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = (e / e.sum(axis=-1, keepdims=True)).astype(xd.dtype)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record(s, (x,), bwd)


_ACTIVATIONS = {"relu": relu, "elu": elu, "sigmoid": sigmoid, "softmax_channels": softmax_channels}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# --- normalization and regularization ----------------------------------------------


def channel_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel spatial normalization followed by an affine map.

    Statistics never cross the batch axis, so a sample's output does not
    depend on what else is in the batch.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    xb, squeezed = _batched(x)
    xd = np.ascontiguousarray(xb.data)
    sd = np.ascontiguousarray(scale.data, dtype=xd.dtype)
    bd = np.ascontiguousarray(shift.data, dtype=xd.dtype)
    out, xhat, inv = kernels.norm_forward(xd, sd, bd, float(eps))

    def bwd(g):
        dx, dscale, dshift = kernels.norm_backward(np.ascontiguousarray(g, dtype=xd.dtype), xhat, inv, sd)
        return dx, dscale.sum(axis=0).astype(scale.dtype), dshift.sum(axis=0).astype(shift.dtype)

    return _unbatch(record(out, (xb, scale, shift), bwd), squeezed)


def dropout(x: Tensor, rate: float, rng: Union[np.random.Generator, int, None] = None,
            training: bool = True) -> Tensor:
    """Inverted dropout; identity (the same object) in inference mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return record(x.data * keep, (x,), lambda g: (g * keep,))
