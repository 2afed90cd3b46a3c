"""Image-shaped differentiable ops: convolution, pooling, bilinear grid sampling.

All feature maps are ``C x H x W`` (no batch axis).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from ..errors import DimensionError
from .tensor import Tensor


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects CxHxW input and OxCxkxk kernel, got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise DimensionError(f"kernel {w.shape} incompatible with input channels {c}")
    if b is not None and b.shape != (o,):
        raise DimensionError(f"bias shape {b.shape} != ({o},)")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError("input smaller than kernel")
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s][:, :ho, :wo]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    w2 = w.data.reshape(o, c * k * k)
    out = w2 @ cols
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(o, ho, wo)

    def fn(g):
        g2 = g.reshape(o, ho * wo)
        dw = (g2 @ cols.T).reshape(w.shape)
        dcols = (w2.T @ g2).reshape(c, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j]
        dx = dxp[:, p:p + h, p:p + wd]
        db = g2.sum(axis=1) if b is not None else None
        return (dx, dw, db) if b is not None else (dx, dw)

    inputs = (x, w, b) if b is not None else (x, w)
    return Tensor._from_op(out, inputs, fn, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    if x.ndim != 3:
        raise DimensionError(f"avg_pool2 expects CxHxW, got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def fn(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return Tensor._from_op(out, (x,), fn, "avg_pool2")


def _snap_tolerance(dtype) -> float:
    return 1e-4 if np.dtype(dtype) == np.float32 else 1e-9


def grid_sample(feat: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of ``feat`` at normalized coordinates with zero padding.

    ``grid[..., 0]`` is x (width axis), ``grid[..., 1]`` is y; corner pixel
    centres sit at exactly -1 and +1. Coordinates within a rounding tolerance
    of a pixel centre are snapped onto it, which makes the identity grid an
    exact pass-through.
    """
    if feat.ndim != 3 or grid.ndim != 3 or grid.shape[2] != 2:
        raise DimensionError(f"grid_sample expects CxHxW and H'xW'x2, got {feat.shape}, {grid.shape}")
    c, h, w = feat.shape
    ho, wo, _ = grid.shape
    sx = 0.5 * (w - 1)
    sy = 0.5 * (h - 1)
    ix = (grid.data[..., 0].astype(np.float64) + 1.0) * sx
    iy = (grid.data[..., 1].astype(np.float64) + 1.0) * sy
    tol = _snap_tolerance(grid.dtype)

    def split(v):
        i0 = np.floor(v)
        f = v - i0
        up = f > 1.0 - tol
        i0 = np.where(up, i0 + 1.0, i0)
        f = np.where(up | (f < tol), 0.0, f)
        return i0.astype(np.int64), f

    x0, fx = split(ix)
    y0, fy = split(iy)
    taps = (
        (y0, x0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (y0, x0 + 1, fx * (1 - fy), (1 - fy), -fx),
        (y0 + 1, x0, (1 - fx) * fy, -fy, (1 - fx)),
        (y0 + 1, x0 + 1, fx * fy, fy, fx),
    )
    flat = feat.data.reshape(c, h * w)
    n_out = ho * wo
    out = np.zeros((c, n_out), dtype=np.float64)
    rows, cols, vals, gathered = [], [], [], []
    for yy, xx, wt, _, _ in taps:
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        idx = (np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)).ravel()
        v = flat[:, idx] * valid.ravel()
        gathered.append(v)
        wt_valid = (wt * valid).ravel()
        out += v * wt_valid
        keep = wt_valid != 0
        rows.append(np.nonzero(keep)[0])
        cols.append(idx[keep])
        vals.append(wt_valid[keep])
    out = out.reshape(c, ho, wo).astype(feat.dtype)

    def fn(g):
        g2 = g.reshape(c, n_out).astype(np.float64)
        smat = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_out, h * w)
        )
        dfeat = np.asarray((smat.T @ g2.T).T).reshape(c, h, w)
        dgx = np.zeros(n_out)
        dgy = np.zeros(n_out)
        for v, (_, _, _, dwx, dwy) in zip(gathered, taps):
            proj = (g2 * v).sum(axis=0)
            dgx += proj * dwx.ravel()
            dgy += proj * dwy.ravel()
        dgrid = np.stack([dgx.reshape(ho, wo) * sx, dgy.reshape(ho, wo) * sy], axis=-1)
        return dfeat, dgrid

    return Tensor._from_op(out, (feat, grid), fn, "grid_sample")
