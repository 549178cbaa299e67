"""Windowed source-target attention between two equal-shape feature maps.

The encoder map supplies queries and the decoder map supplies keys and
values (a config flag swaps those roles).  Both maps are cut into disjoint
m-by-m windows anchored at (0, 0); attention runs inside each window only,
so cost scales with m^4 per window instead of (h*w)^2 for the whole map.
Maps whose sides are not multiples of m are zero-padded at the bottom and
right; padded key positions receive exactly zero attention weight and
padded query rows are cropped away at the end.

Two independent references live here as well: a per-window direct
evaluation with explicit score matrices, and a global all-pairs oracle for
the single-window limit.  Both are plain numpy, sharing nothing with the
taped path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ScaleGuardError, ShapeError
from .ops import ConvParams, conv2d, he_conv
from .tensor import (
    Tensor,
    add,
    bmm,
    crop_top_left,
    masked_softmax,
    mul_const,
    pad_bottom_right,
    permute,
    reshape,
    window_merge,
    window_split,
)

# the global oracle is quadratic in pixel count; refuse anything big
_ORACLE_PIXEL_LIMIT = 4096


class ResidualSource(Enum):
    """Which input map is added back onto the attention output."""

    ENCODER = "encoder"
    DECODER = "decoder"
    NONE = "none"


@dataclass(frozen=True)
class LfamConfig:
    """Settings for one fusion module.

    local_range is the window side m.  proj_channels sets the projection
    width d; None keeps the input channel count, which is required whenever
    a residual is added.  scale_logits divides scores by sqrt(d) before the
    softmax.  swap_qkv makes the decoder supply queries instead.
    """

    local_range: int = 7
    residual_source: ResidualSource = ResidualSource.ENCODER
    proj_channels: int | None = None
    scale_logits: bool = False
    swap_qkv: bool = False

    def __post_init__(self):
        if self.local_range < 1:
            raise ConfigError(f"local_range must be >= 1, got {self.local_range}")
        if self.proj_channels is not None and self.proj_channels < 1:
            raise ConfigError(f"proj_channels must be >= 1, got {self.proj_channels}")


@dataclass(eq=False)
class WindowGrid:
    """Window tiling of an (h, w) map with side m, anchored at (0, 0).

    pad_mask is (rows*m, cols*m), True on real pixels.  key_mask is the same
    information regrouped per window: (n_windows, 1, 1, m*m), window pixels
    in row-major order.
    """

    h: int
    w: int
    m: int
    rows: int
    cols: int
    n_windows: int
    pad_mask: np.ndarray
    key_mask: np.ndarray = field(repr=False)


def window_partition(h: int, w: int, m: int) -> WindowGrid:
    if h < 1 or w < 1 or m < 1:
        raise ConfigError(f"window_partition needs positive h, w, m, got ({h}, {w}, {m})")
    rows = -(-h // m)
    cols = -(-w // m)
    pad_mask = np.zeros((rows * m, cols * m), dtype=bool)
    pad_mask[:h, :w] = True
    key_mask = (pad_mask.reshape(rows, m, cols, m)
                .transpose(0, 2, 1, 3)
                .reshape(rows * cols, 1, 1, m * m))
    return WindowGrid(h=h, w=w, m=m, rows=rows, cols=cols,
                      n_windows=rows * cols, pad_mask=pad_mask, key_mask=key_mask)


@dataclass
class LfamParams:
    """Three pointwise projections producing query, key, and value maps."""

    query: ConvParams
    key: ConvParams
    value: ConvParams

    def __post_init__(self):
        for name, p in (("query", self.query), ("key", self.key), ("value", self.value)):
            if p.kernel != 1 or p.stride != 1 or p.padding != 0:
                raise ConfigError(f"{name} projection must be a plain 1x1 conv")
        if len({p.in_channels for p in (self.query, self.key, self.value)}) != 1:
            raise ConfigError("projections disagree on input channels")
        if len({p.out_channels for p in (self.query, self.key, self.value)}) != 1:
            raise ConfigError("projections disagree on output channels")

    @property
    def in_channels(self) -> int:
        return self.query.in_channels

    @property
    def proj_channels(self) -> int:
        return self.query.out_channels

    def tensors(self) -> tuple[Tensor, ...]:
        return self.query.tensors() + self.key.tensors() + self.value.tensors()


def init_lfam_params(in_channels: int, rng: np.random.Generator,
                     proj_channels: int | None = None, dtype=np.float32) -> LfamParams:
    d = in_channels if proj_channels is None else proj_channels
    return LfamParams(query=he_conv(in_channels, d, 1, rng, dtype=dtype),
                      key=he_conv(in_channels, d, 1, rng, dtype=dtype),
                      value=he_conv(in_channels, d, 1, rng, dtype=dtype))


@dataclass(eq=False)
class AttentionWeights:
    """Post-softmax scores, (n, n_windows, m*m, m*m): [batch, window, query, key].

    Pixel (i, j) lives in window (i // m) * cols + (j // m) at in-window
    position (i % m) * m + (j % m); positions continue past h, w into the
    padding.  Padded key columns are exactly zero.
    """

    grid: WindowGrid
    weights: np.ndarray

    def window_of(self, i: int, j: int) -> int:
        return (i // self.grid.m) * self.grid.cols + (j // self.grid.m)

    def position_in_window(self, i: int, j: int) -> int:
        return (i % self.grid.m) * self.grid.m + (j % self.grid.m)


def _validate_pair(encoder: Tensor, decoder: Tensor, params: LfamParams, cfg: LfamConfig) -> None:
    if encoder.shape != decoder.shape:
        raise ShapeError(f"fusion inputs differ: encoder {encoder.shape} vs decoder {decoder.shape}")
    c = encoder.shape[1]
    if params.in_channels != c:
        raise ShapeError(f"projections expect {params.in_channels} channels, maps have {c}")
    if cfg.proj_channels is not None and cfg.proj_channels != params.proj_channels:
        raise ConfigError(f"config wants proj_channels={cfg.proj_channels}, "
                          f"params have {params.proj_channels}")
    if cfg.residual_source is not ResidualSource.NONE and params.proj_channels != c:
        raise ConfigError(f"residual needs proj_channels == input channels, "
                          f"got {params.proj_channels} vs {c}")


def lfam_attention(encoder: Tensor, decoder: Tensor, params: LfamParams,
                   cfg: LfamConfig) -> tuple[Tensor, AttentionWeights]:
    """Fused map plus the attention weights that produced it."""
    _validate_pair(encoder, decoder, params, cfg)
    n, c, h, w = encoder.shape
    m = cfg.local_range
    d = params.proj_channels
    grid = window_partition(h, w, m)

    q_src, kv_src = (decoder, encoder) if cfg.swap_qkv else (encoder, decoder)
    q = conv2d(q_src, params.query)
    k = conv2d(kv_src, params.key)
    v = conv2d(kv_src, params.value)

    pad_h, pad_w = grid.rows * m - h, grid.cols * m - w
    batch = n * grid.n_windows

    def rows_of(t: Tensor) -> Tensor:
        if pad_h or pad_w:
            t = pad_bottom_right(t, pad_h, pad_w)
        tiles = window_split(t, m)
        return reshape(permute(tiles, (0, 2, 3, 1)), (batch, 1, m * m, d))

    qm, km, vm = rows_of(q), rows_of(k), rows_of(v)
    logits = bmm(qm, permute(km, (0, 1, 3, 2)))
    if cfg.scale_logits:
        logits = mul_const(logits, 1.0 / np.sqrt(d))
    weights = masked_softmax(logits, np.tile(grid.key_mask, (n, 1, 1, 1)))
    gathered = bmm(weights, vm)

    tiles = permute(reshape(gathered, (batch, m, m, d)), (0, 3, 1, 2))
    fused = window_merge(tiles, n, grid.rows * m, grid.cols * m)
    if pad_h or pad_w:
        fused = crop_top_left(fused, h, w)

    if cfg.residual_source is ResidualSource.ENCODER:
        fused = add(fused, encoder)
    elif cfg.residual_source is ResidualSource.DECODER:
        fused = add(fused, decoder)

    attn = AttentionWeights(grid, weights.data.reshape(n, grid.n_windows, m * m, m * m))
    return fused, attn


def lfam_forward(encoder: Tensor, decoder: Tensor, params: LfamParams, cfg: LfamConfig) -> Tensor:
    """Windowed source-target attention between encoder and decoder maps."""
    fused, _ = lfam_attention(encoder, decoder, params, cfg)
    return fused


# ---------------------------------------------------------------------------
# independent references (plain numpy, no tape, no shared attention code)


def _project_pixels(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Per-pixel linear map, the direct meaning of a 1x1 conv."""
    return np.einsum("dc,nchw->ndhw", p.weight.data[:, :, 0, 0], x) + p.bias.data


def windowed_reference(encoder: Tensor, decoder: Tensor, params: LfamParams,
                       cfg: LfamConfig) -> np.ndarray:
    """Direct per-window evaluation with explicit score matrices.

    Walks the window grid, gathers the real pixels of each window, builds
    the full score matrix, and scatters results back.  Padding never enters:
    skipping padded pixels here must equal masking them there.
    """
    _validate_pair(encoder, decoder, params, cfg)
    n, c, h, w = encoder.shape
    m = cfg.local_range
    enc, dec = np.asarray(encoder.data, dtype=np.float64), np.asarray(decoder.data, dtype=np.float64)
    q_src, kv_src = (dec, enc) if cfg.swap_qkv else (enc, dec)
    q = _project_pixels(q_src, params.query)
    k = _project_pixels(kv_src, params.key)
    v = _project_pixels(kv_src, params.value)
    d = params.proj_channels

    out = np.zeros((n, d, h, w), dtype=np.float64)
    for ni in range(n):
        for i0 in range(0, h, m):
            for j0 in range(0, w, m):
                i1, j1 = min(i0 + m, h), min(j0 + m, w)
                qm = q[ni, :, i0:i1, j0:j1].reshape(d, -1).T
                km = k[ni, :, i0:i1, j0:j1].reshape(d, -1).T
                vm = v[ni, :, i0:i1, j0:j1].reshape(d, -1).T
                scores = qm @ km.T
                if cfg.scale_logits:
                    scores = scores / np.sqrt(d)
                scores = scores - scores.max(axis=1, keepdims=True)
                e = np.exp(scores)
                wgt = e / e.sum(axis=1, keepdims=True)
                out[ni, :, i0:i1, j0:j1] = (wgt @ vm).T.reshape(d, i1 - i0, j1 - j0)

    if cfg.residual_source is ResidualSource.ENCODER:
        out = out + enc
    elif cfg.residual_source is ResidualSource.DECODER:
        out = out + dec
    return out


def global_attention_oracle(encoder: Tensor, decoder: Tensor, params: LfamParams) -> Tensor:
    """All-pairs attention over the whole map, one query pixel at a time.

    Matches lfam_forward with residual none, no logit scaling, and a window
    covering the entire map.  Quadratic in pixel count, so maps beyond
    4096 pixels are refused.
    """
    if encoder.shape != decoder.shape:
        raise ShapeError(f"fusion inputs differ: encoder {encoder.shape} vs decoder {decoder.shape}")
    n, c, h, w = encoder.shape
    if h * w > _ORACLE_PIXEL_LIMIT:
        raise ScaleGuardError(f"global oracle refuses {h}x{w} = {h * w} pixels "
                              f"(limit {_ORACLE_PIXEL_LIMIT})")
    enc = np.asarray(encoder.data, dtype=np.float64)
    dec = np.asarray(decoder.data, dtype=np.float64)
    q = _project_pixels(enc, params.query)
    k = _project_pixels(dec, params.key)
    v = _project_pixels(dec, params.value)
    d = params.proj_channels

    out = np.zeros((n, d, h, w), dtype=np.float64)
    for ni in range(n):
        qf = q[ni].reshape(d, h * w).T
        kf = k[ni].reshape(d, h * w).T
        vf = v[ni].reshape(d, h * w).T
        yf = np.zeros((h * w, d))
        for pix in range(h * w):
            scores = kf @ qf[pix]
            scores = scores - scores.max()
            e = np.exp(scores)
            yf[pix] = (e / e.sum()) @ vf
        out[ni] = yf.T.reshape(d, h, w)
    return Tensor(out)
