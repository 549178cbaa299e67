"""Convolution, pooling, and upconvolution layers over the tape.

conv2d lowers to an im2col matrix product; its backward scatters column
gradients with one loop per kernel tap.  maxpool2x2 breaks ties toward the
first position in row-major block order so forward and backward agree
bit-for-bit.  upconv2x2 is the exact adjoint of a stride-2 kernel-2
convolution with the in/out axes of the weight swapped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (
    Tensor,
    _apply,
    add,
    add_const,
    mul,
    pow_const,
    sub,
    sum_axes,
)


@dataclass
class ConvParams:
    """Weights for one convolution: weight (out_ch, in_ch, k, k), bias (1, out_ch, 1, 1)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        oc, ic, kh, kw = self.weight.shape
        if kh != kw or kh not in (1, 2, 3):
            raise ContractError(f"conv kernel must be square with k in (1, 2, 3), got {self.weight.shape}")
        if self.bias.shape != (1, oc, 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match out_ch {oc}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError(f"invalid stride/padding ({self.stride}, {self.padding})")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def tensors(self) -> tuple[Tensor, Tensor]:
        return (self.weight, self.bias)


def he_conv(in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
            stride: int = 1, padding: int = 0, dtype=np.float32) -> ConvParams:
    """He-normal weight init, std sqrt(2 / fan_in) with fan_in = in_ch * k * k."""
    std = np.sqrt(2.0 / (in_ch * k * k))
    w = (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)
    b = np.zeros((1, out_ch, 1, 1), dtype=dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                      stride=stride, padding=padding)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2-D convolution (cross-correlation) with symmetric zero padding."""
    oc, ic, kh, kw = p.weight.shape
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ic}")
    s, pad = p.stride, p.padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw or (hp - kh) % s or (wp - kw) % s:
        raise ShapeError(f"conv2d: input {x.shape} with k={kh} s={s} pad={pad} "
                         "gives a non-integer output size")
    oh, ow = (hp - kh) // s + 1, (wp - kw) // s + 1

    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s]  # (n, ic, oh, ow, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, ic * kh * kw)
    wmat = p.weight.data.reshape(oc, ic * kh * kw)
    out = (cols @ wmat.T).transpose(0, 2, 1).reshape(n, oc, oh, ow) + p.bias.data

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n, oh * ow, oc)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1)
        gw = np.einsum("npo,npk->ok", gmat, cols).reshape(p.weight.shape)
        gcols = (gmat @ wmat).reshape(n, oh, ow, ic, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, ic, hp, wp), dtype=g.dtype)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, :, di:di + oh * s:s, dj:dj + ow * s:s] += gcols[:, :, :, :, di, dj]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return (gx, gw, gb)

    return _apply("conv2d", (x, p.weight, p.bias), out, vjp)


def maxpool2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling, stride 2.

    Returns the pooled tensor and an index array (n, c, h/2, w/2) whose
    values 0..3 name the argmax position inside each block in row-major
    order; ties go to the first position.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial dims must be even, got {x.shape}")
    blocks = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h // 2, w // 2, 4))
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (gb.reshape(n, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (gx,)

    return _apply("maxpool2x2", (x,), out, vjp), idx


def upconv2x2(x: Tensor, p: ConvParams) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel, doubling h and w.

    With weight (out_ch, in_ch, 2, 2) this is the adjoint of a stride-2
    kernel-2 convolution whose weight has in/out axes swapped; blocks do
    not overlap, so each output pixel has exactly one source.
    """
    oc, ic, kh, kw = p.weight.shape
    if kh != 2 or kw != 2 or p.stride != 2 or p.padding != 0:
        raise ContractError("upconv2x2 needs k=2, stride=2, padding=0 params")
    n, c, h, w = x.shape
    if c != ic:
        raise ShapeError(f"upconv2x2: input has {c} channels, weight expects {ic}")
    out6 = np.einsum("nchw,ocij->nohiwj", x.data, p.weight.data)
    out = out6.reshape(n, oc, 2 * h, 2 * w) + p.bias.data

    def vjp(g):
        g6 = g.reshape(n, oc, h, 2, w, 2)
        gx = np.einsum("nohiwj,ocij->nchw", g6, p.weight.data)
        gw = np.einsum("nohiwj,nchw->ocij", g6, x.data)
        gb = g.sum(axis=(0, 2, 3)).reshape(1, oc, 1, 1)
        return (gx, gw, gb)

    return _apply("upconv2x2", (x, p.weight, p.bias), out, vjp)


@dataclass
class NormParams:
    """Per-channel affine applied after spatial standardization."""

    scale: Tensor
    shift: Tensor

    def tensors(self) -> tuple[Tensor, Tensor]:
        return (self.scale, self.shift)


def init_norm(channels: int, dtype=np.float32) -> NormParams:
    return NormParams(Tensor(np.ones((1, channels, 1, 1), dtype=dtype), requires_grad=True),
                      Tensor(np.zeros((1, channels, 1, 1), dtype=dtype), requires_grad=True))


def channel_norm(x: Tensor, p: NormParams, eps: float = 1e-5) -> Tensor:
    """Standardize each (sample, channel) plane over h, w, then scale and shift."""
    _, _, h, w = x.shape
    inv_hw = 1.0 / (h * w)
    mu = sum_axes(x, (2, 3)) * inv_hw
    xc = sub(x, mu)
    var = sum_axes(mul(xc, xc), (2, 3)) * inv_hw
    inv_std = pow_const(add_const(var, eps), -0.5)
    return add(mul(mul(xc, inv_std), p.scale), p.shift)
