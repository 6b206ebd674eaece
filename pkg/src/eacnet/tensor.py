"""Dense-tensor primitives with exact forward and analytic backward passes.

Tensors are plain numpy arrays (row-major, at most 4 axes: batch, channel,
height, width) in either float32 or float64; every op preserves the input
dtype. Ops are pure functions: each ``*_backward`` takes the original
forward inputs plus the upstream gradient and returns gradients shaped
like the corresponding inputs. float64 is required for finite-difference
gradient checks.

No graph autodiff, no GPU, no broadcasting beyond what the layers need.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

DTYPE32 = np.float32
DTYPE64 = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _check_upstream(gy: Tensor, out_shape: tuple[int, ...], op: str) -> None:
    if tuple(gy.shape) != tuple(out_shape):
        raise ShapeError(
            f"{op}: upstream gradient shape {tuple(gy.shape)} != output shape {tuple(out_shape)}"
        )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return ((h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1)


def _pad2d(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp: Tensor, kh: int, kw: int, stride: int, oh: int, ow: int) -> Tensor:
    """Gather conv patches as a [N, C*kh*kw, oh*ow] stack via kh*kw slice copies."""
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols: Tensor, xp_shape: tuple[int, ...], kh: int, kw: int,
            stride: int, oh: int, ow: int) -> Tensor:
    """Scatter-add the transpose of _im2col."""
    n, c, hp, wp = xp_shape
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    return gxp


def conv2d_with_patches(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
                        stride: int = 1, padding: int = 0) -> tuple[Tensor, Tensor]:
    """conv2d that also returns the gathered patch matrix for backward reuse."""
    out, cols = _conv2d_impl(x, kernel, bias, stride, padding)
    return out, cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate x[N,Cin,H,W] with kernel[Cout,Cin,kh,kw], zero padded."""
    _require(x.ndim == 4, f"conv2d: input must be 4-D, got shape {tuple(x.shape)}")
    _require(kernel.ndim == 4, f"conv2d: kernel must be 4-D, got shape {tuple(kernel.shape)}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ShapeError(
            f"conv2d: input channels {tuple(x.shape)} do not match kernel channels {tuple(kernel.shape)}"
        )
    _require(stride >= 1, f"conv2d: stride must be >= 1, got {stride}")
    _require(kh <= h + 2 * padding and kw <= w + 2 * padding,
             f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None:
        _require(bias.shape == (cout,), f"conv2d: bias shape {tuple(bias.shape)} != ({cout},)")
    out, _ = _conv2d_impl(x, kernel, bias, stride, padding)
    return out


def _conv2d_impl(x, kernel, bias, stride, padding):
    n = x.shape[0]
    cout, _, kh, kw = kernel.shape
    oh, ow = conv2d_output_hw(x.shape[2], x.shape[3], kh, kw, stride, padding)
    cols = _im2col(_pad2d(x, padding), kh, kw, stride, oh, ow)
    out = (kernel.reshape(cout, -1) @ cols).reshape(n, cout, oh, ow)
    if bias is not None:
        out += bias[:, None, None]
    return out, cols


def conv2d_backward(x: Tensor, kernel: Tensor, gy: Tensor, bias: Tensor | None = None,
                    stride: int = 1, padding: int = 0,
                    cols: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Gradients (gx, gkernel, gbias) of conv2d; gbias is None when bias is None.

    cols may carry the patch matrix from conv2d_with_patches to skip its
    recomputation.
    """
    n, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    oh, ow = conv2d_output_hw(h, w, kh, kw, stride, padding)
    _check_upstream(gy, (n, cout, oh, ow), "conv2d")
    xp_shape = (n, cin, h + 2 * padding, w + 2 * padding)
    if cols is None:
        cols = _im2col(_pad2d(x, padding), kh, kw, stride, oh, ow)
    gy_mat = gy.reshape(n, cout, oh * ow)
    gkernel = np.einsum("ncs,nks->ck", gy_mat, cols, optimize=True).reshape(kernel.shape)
    gcols = kernel.reshape(cout, -1).T @ gy_mat         # (n, cin*kh*kw, oh*ow)
    gxp = _col2im(gcols, xp_shape, kh, kw, stride, oh, ow)
    gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
    gbias = gy_mat.sum(axis=(0, 2)) if bias is not None else None
    return gx, gkernel, gbias


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> tuple[Tensor, Tensor]:
    """2x2/stride-2 max pool. Returns (output, argmax map).

    The argmax map holds, per output cell, the row-major index in {0..3} of
    the winning pixel inside its 2x2 window (first occurrence on ties).
    """
    _require(x.ndim == 4, f"maxpool2: input must be 4-D, got shape {tuple(x.shape)}")
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, f"maxpool2: H and W must be even, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(idx: Tensor, gy: Tensor) -> Tensor:
    """Route gy back to the stored argmax positions (zeros elsewhere)."""
    _check_upstream(gy, idx.shape, "maxpool2")
    n, c, oh, ow = gy.shape
    gwin = np.zeros((n, c, oh, ow, 4), dtype=gy.dtype)
    np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
    return gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)


# ---------------------------------------------------------------------------
# matmul and elementwise
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim == 2 and b.ndim == 2,
             f"matmul: operands must be 2-D, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {tuple(a.shape)} and {tuple(b.shape)} do not match")
    return a @ b


def matmul_backward(a: Tensor, b: Tensor, gy: Tensor) -> tuple[Tensor, Tensor]:
    _check_upstream(gy, (a.shape[0], b.shape[1]), "matmul")
    return gy @ b.T, a.T @ gy


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {tuple(a.shape)} and {tuple(b.shape)} do not match")
    return a + b


def add_backward(a: Tensor, b: Tensor, gy: Tensor) -> tuple[Tensor, Tensor]:
    _check_upstream(gy, a.shape, "add")
    return gy, gy


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {tuple(a.shape)} and {tuple(b.shape)} do not match")
    return a * b


def mul_backward(a: Tensor, b: Tensor, gy: Tensor) -> tuple[Tensor, Tensor]:
    _check_upstream(gy, a.shape, "mul")
    return gy * b, gy * a


def scale(x: Tensor, s: float) -> Tensor:
    return x * s


def scale_backward(x: Tensor, s: float, gy: Tensor) -> tuple[Tensor, float]:
    _check_upstream(gy, x.shape, "scale")
    return gy * s, float((gy * x).sum())


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, gy: Tensor) -> Tensor:
    _check_upstream(gy, x.shape, "relu")
    return gy * (x > 0)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(x: Tensor, gy: Tensor) -> Tensor:
    _check_upstream(gy, x.shape, "sigmoid")
    s = sigmoid(x)
    return gy * s * (1.0 - s)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def nearest_upscale2x(x: Tensor) -> Tensor:
    """Replicate every pixel of x[N,C,h,w] into a 2x2 block."""
    _require(x.ndim == 4, f"nearest_upscale2x: input must be 4-D, got shape {tuple(x.shape)}")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def nearest_upscale2x_backward(x: Tensor, gy: Tensor) -> Tensor:
    n, c, h, w = x.shape
    _check_upstream(gy, (n, c, 2 * h, 2 * w), "nearest_upscale2x")
    return gy.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


def _resize_axis_coords(n_in: int, n_out: int, dtype) -> tuple[Tensor, Tensor, Tensor]:
    """Corner-aligned source coordinates: lower index, upper index, upper weight."""
    if n_out == 1:
        pos = np.zeros(1, dtype=dtype)
    else:
        pos = np.arange(n_out, dtype=dtype) * (dtype(n_in - 1) / dtype(n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear_resize(grid: Tensor, to: tuple[int, int]) -> Tensor:
    """Resize a 2-D map with corner-aligned bilinear interpolation.

    Corners map exactly to corners; interpolation weights lie in [0,1], so
    output values never overshoot the input's min/max.
    """
    _require(grid.ndim == 2, f"bilinear_resize: input must be 2-D, got shape {tuple(grid.shape)}")
    h2, w2 = to
    _require(h2 >= 1 and w2 >= 1, f"bilinear_resize: target {to} must be >= 1 per axis")
    h, w = grid.shape
    ry_lo, ry_hi, wy = _resize_axis_coords(h, h2, grid.dtype.type)
    rx_lo, rx_hi, wx = _resize_axis_coords(w, w2, grid.dtype.type)
    top = grid[ry_lo][:, rx_lo] * (1 - wx) + grid[ry_lo][:, rx_hi] * wx
    bot = grid[ry_hi][:, rx_lo] * (1 - wx) + grid[ry_hi][:, rx_hi] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def bilinear_resize_backward(grid: Tensor, to: tuple[int, int], gy: Tensor) -> Tensor:
    """Scatter the interpolation weights back onto the source grid."""
    h2, w2 = to
    _check_upstream(gy, (h2, w2), "bilinear_resize")
    h, w = grid.shape
    ry_lo, ry_hi, wy = _resize_axis_coords(h, h2, grid.dtype.type)
    rx_lo, rx_hi, wx = _resize_axis_coords(w, w2, grid.dtype.type)
    gx = np.zeros_like(grid)
    yy_lo = np.broadcast_to(ry_lo[:, None], (h2, w2))
    yy_hi = np.broadcast_to(ry_hi[:, None], (h2, w2))
    xx_lo = np.broadcast_to(rx_lo[None, :], (h2, w2))
    xx_hi = np.broadcast_to(rx_hi[None, :], (h2, w2))
    wyc = (1 - wy)[:, None]
    wxc = (1 - wx)[None, :]
    np.add.at(gx, (yy_lo, xx_lo), gy * wyc * wxc)
    np.add.at(gx, (yy_lo, xx_hi), gy * wyc * wx[None, :])
    np.add.at(gx, (yy_hi, xx_lo), gy * wy[:, None] * wxc)
    np.add.at(gx, (yy_hi, xx_hi), gy * wy[:, None] * wx[None, :])
    return gx


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numeric_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())
