"""Attention-enhancing, region-cropping, LRN and region-head layers.

All layers are pure functions of (inputs, params) with analytic backward
passes. The enhancing layer adds an attention-modulated, 1x1-projected copy
of a conv group's input to the group's output; with a zero attention map it
reduces bit-exactly to the plain group output (the projection is bias-free).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import AttentionMap, AUCenterSet, map_center_to_grid

CROP_WINDOW = 3


@dataclass(frozen=True)
class EnhanceParams:
    projection_kernel: np.ndarray   # (Cout, Cin, 1, 1), no bias

    def __post_init__(self):
        k = self.projection_kernel
        if k.ndim != 4 or k.shape[2:] != (1, 1):
            raise T.ShapeError(f"projection kernel must be (Cout,Cin,1,1), got {tuple(k.shape)}")


@dataclass(frozen=True)
class LrnParams:
    k: float = 2.0
    alpha: float = 0.002
    beta: float = 0.75
    window: int = 5     # across channels

    def __post_init__(self):
        if self.k <= 0 or self.alpha < 0 or not 0 < self.beta <= 1 or self.window % 2 == 0:
            raise ValueError(f"invalid LRN params {self}")


# ---------------------------------------------------------------------------
# enhancing layer
# ---------------------------------------------------------------------------

def _resize_attention(a: AttentionMap | np.ndarray, hw: tuple[int, int], dtype) -> np.ndarray:
    grid = a.grid if isinstance(a, AttentionMap) else a
    return T.bilinear_resize(grid.astype(dtype, copy=False), hw)


def enhance_forward(x: np.ndarray, group_output: np.ndarray,
                    a: AttentionMap | np.ndarray, params: EnhanceParams) -> np.ndarray:
    """group_output + conv1x1(resized_attention * x)."""
    if group_output.shape[2:] != x.shape[2:] or group_output.shape[0] != x.shape[0]:
        raise T.ShapeError(
            f"enhance: group output {tuple(group_output.shape)} does not match input {tuple(x.shape)}")
    a_r = _resize_attention(a, x.shape[2:], x.dtype)
    skip = T.conv2d(x * a_r[None, None], params.projection_kernel)
    return T.add(group_output, skip)


def enhance_backward(x: np.ndarray, group_output: np.ndarray, a: AttentionMap | np.ndarray,
                     params: EnhanceParams, gy: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, ggroup_output, gprojection_kernel)."""
    T._check_upstream(gy, group_output.shape, "enhance")
    a_r = _resize_attention(a, x.shape[2:], x.dtype)
    modulated = x * a_r[None, None]
    gmod, gkernel, _ = T.conv2d_backward(modulated, params.projection_kernel, gy)
    return gmod * a_r[None, None], gy, gkernel


# ---------------------------------------------------------------------------
# cropping layer
# ---------------------------------------------------------------------------

def crop_coordinates(centers: AUCenterSet, grid: int) -> list[tuple[int, int]]:
    """(row, col) on the feature grid for each of the 20 centers, in order."""
    if len(centers.centers) != 20:
        raise ValueError(f"need exactly 20 AU centers, got {len(centers.centers)}")
    return [map_center_to_grid(c.position, grid, CROP_WINDOW) for c in centers.centers]


def crop_forward(f: np.ndarray, centers: AUCenterSet) -> list[np.ndarray]:
    """Slice twenty 3x3 windows from f[N,C,G,G] at the AU-center coordinates."""
    g = f.shape[2]
    if f.ndim != 4 or f.shape[3] != g or g < CROP_WINDOW:
        raise T.ShapeError(f"crop: need [N,C,G,G] with G >= {CROP_WINDOW}, got {tuple(f.shape)}")
    crops = []
    for r, c in crop_coordinates(centers, g):
        crops.append(f[:, :, r - 1 : r + 2, c - 1 : c + 2].copy())
    return crops


def crop_backward(f_shape: tuple[int, ...], centers: AUCenterSet,
                  gys: list[np.ndarray]) -> np.ndarray:
    """Scatter-add the 20 window gradients back onto the feature grid."""
    if len(gys) != 20:
        raise ValueError(f"need 20 upstream gradients, got {len(gys)}")
    gx = np.zeros(f_shape, dtype=gys[0].dtype)
    for (r, c), gy in zip(crop_coordinates(centers, f_shape[2]), gys):
        T._check_upstream(gy, (f_shape[0], f_shape[1], CROP_WINDOW, CROP_WINDOW), "crop")
        gx[:, :, r - 1 : r + 2, c - 1 : c + 2] += gy
    return gx


# ---------------------------------------------------------------------------
# local response normalization (across channels)
# ---------------------------------------------------------------------------

def _channel_window_sum(t: np.ndarray, window: int) -> np.ndarray:
    """Sliding-window sum over the channel axis, zero-padded at the borders."""
    half = window // 2
    c = t.shape[1]
    csum = np.concatenate([np.zeros_like(t[:, :1]), np.cumsum(t, axis=1)], axis=1)
    hi = np.minimum(np.arange(c) + half + 1, c)
    lo = np.maximum(np.arange(c) - half, 0)
    return csum[:, hi] - csum[:, lo]


def lrn(x: np.ndarray, params: LrnParams = LrnParams()) -> np.ndarray:
    """x / (k + alpha * sum of squares over the 5-channel neighborhood)^beta."""
    s = _channel_window_sum(x * x, params.window)
    return x * (params.k + params.alpha * s) ** (-params.beta)


def lrn_backward(x: np.ndarray, gy: np.ndarray, params: LrnParams = LrnParams()) -> np.ndarray:
    T._check_upstream(gy, x.shape, "lrn")
    s = _channel_window_sum(x * x, params.window)
    d = params.k + params.alpha * s
    inner = _channel_window_sum(gy * x * d ** (-params.beta - 1), params.window)
    return gy * d ** (-params.beta) - 2 * params.alpha * params.beta * x * inner


# ---------------------------------------------------------------------------
# region heads
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionHeadParams:
    conv_kernel: np.ndarray   # (C, C, 3, 3)
    conv_bias: np.ndarray     # (C,)
    fc_weight: np.ndarray     # (C*16, width)
    fc_bias: np.ndarray       # (width,)


def region_head_forward(crop: np.ndarray, params: RegionHeadParams) -> np.ndarray:
    """upscale2x -> 3x3 valid conv -> relu -> flatten -> fc -> relu."""
    up = T.nearest_upscale2x(crop)                                    # [N,C,6,6]
    z = T.conv2d(up, params.conv_kernel, params.conv_bias)            # [N,C,4,4]
    r = T.relu(z)
    flat = r.reshape(r.shape[0], -1)
    y = T.matmul(flat, params.fc_weight) + params.fc_bias
    return T.relu(y)


def region_head_backward(crop: np.ndarray, params: RegionHeadParams, gy: np.ndarray
                         ) -> tuple[np.ndarray, RegionHeadParams]:
    """Gradients (gcrop, param gradients packed as RegionHeadParams)."""
    up = T.nearest_upscale2x(crop)
    z = T.conv2d(up, params.conv_kernel, params.conv_bias)
    r = T.relu(z)
    flat = r.reshape(r.shape[0], -1)
    y = T.matmul(flat, params.fc_weight) + params.fc_bias
    T._check_upstream(gy, y.shape, "region_head")
    gyy = T.relu_backward(y, gy)
    gflat, gw = T.matmul_backward(flat, params.fc_weight, gyy)
    gb = gyy.sum(axis=0)
    gr = gflat.reshape(r.shape)
    gz = T.relu_backward(z, gr)
    gup, gck, gcb = T.conv2d_backward(up, params.conv_kernel, gz, params.conv_bias)
    gcrop = T.nearest_upscale2x_backward(crop, gup)
    return gcrop, RegionHeadParams(conv_kernel=gck, conv_bias=gcb, fc_weight=gw, fc_bias=gb)


def concat_regions(heads: list[np.ndarray]) -> np.ndarray:
    """Concatenate the 20 region-head outputs in canonical center order."""
    width = heads[0].shape[1]
    for i, h in enumerate(heads):
        if h.shape != (heads[0].shape[0], width):
            raise T.ShapeError(
                f"concat: head {i} shape {tuple(h.shape)} != {(heads[0].shape[0], width)}")
    return np.concatenate(heads, axis=1)


def concat_regions_backward(heads: list[np.ndarray], gy: np.ndarray) -> list[np.ndarray]:
    width = heads[0].shape[1]
    T._check_upstream(gy, (heads[0].shape[0], width * len(heads)), "concat")
    return [gy[:, i * width : (i + 1) * width] for i in range(len(heads))]
