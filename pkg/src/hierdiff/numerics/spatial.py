"""Spatial primitives on channels-last feature maps: conv2d and resizing."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, add, as_tensor, make_op


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an ``[B,]H,W,Cin`` map with a ``kh,kw,Cin,Cout`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernel.ndim != 4 or x.shape[-1] != kernel.shape[2]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    xd = x.data if batched else x.data[None]
    B, H, W, Cin = xd.shape
    kh, kw, _, Cout = kernel.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError(
            f"conv2d kernel {kernel.shape} does not fit padded input {x.shape} (padding={padding})")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * Cin)
    k2 = kernel.data.reshape(kh * kw * Cin, Cout)
    out = (cols @ k2).reshape(B, Ho, Wo, Cout)

    def bw(g):
        g = g if batched else g[None]
        g2 = g.reshape(-1, Cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        if not x.requires_grad:
            return None, gk
        gcols = (g2 @ k2.T).reshape(B, Ho, Wo, kh, kw, Cin)
        gxp = np.zeros((B, Hp, Wp, Cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
        gx = gxp[:, padding:padding + H, padding:padding + W]
        return (gx if batched else gx[0]), gk

    res = make_op(out if batched else out[0], (x, kernel), bw)
    if bias is not None:
        res = add(res, bias)
    return res


@lru_cache(maxsize=256)
def resize_matrix(n_out: int, n_in: int, mode: str = "bilinear") -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` matrix for 1-D half-pixel resampling."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"resize extents must be >= 1, got {n_out} from {n_in}")
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        if mode == "nearest":
            m[i, min(int(np.floor((i + 0.5) * scale)), n_in - 1)] = 1.0
        elif mode == "bilinear":
            src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
            j0 = int(np.floor(src))
            j1 = min(j0 + 1, n_in - 1)
            w = src - j0
            m[i, j0] += 1.0 - w
            m[i, j1] += w
        else:
            raise ValueError(f"unknown interpolation mode {mode!r}")
    m.setflags(write=False)
    return m


def interpolate(x, target_h: int, target_w: int, mode: str = "bilinear") -> Tensor:
    """Resize an ``[B,]h,w,C`` map to ``target_h x target_w`` (half-pixel centers)."""
    x = as_tensor(x)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"interpolate target must be >= 1, got ({target_h}, {target_w})")
    if x.ndim not in (3, 4):
        raise ValueError(f"interpolate expects [B,]h,w,C input, got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    rh = resize_matrix(target_h, h, mode)
    rw = resize_matrix(target_w, w, mode)
    return make_op(_separable(x.data, rh, rw), (x,), lambda g: (_separable(g, rh.T, rw.T),))


def _separable(x: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``rows @ x @ cols.T`` over the two spatial axes of a ``...,h,w,C`` map."""
    lead, (h, w, c) = x.shape[:-3], x.shape[-3:]
    y = np.matmul(rows, x.reshape(lead + (h, w * c))).reshape(lead + (rows.shape[0], w, c))
    return np.matmul(cols, y)
