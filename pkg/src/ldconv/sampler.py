"""Bilinear sampling of fractional coordinates with boundary clamping.

Coordinates are clamped into [0, H-1] x [0, W-1] before interpolation.  With
r0 = floor(r), r1 = min(r0 + 1, H-1) and fractional parts t = r - r0,
u = s - s0, the sample is

    (1-t)(1-u) x[r0,s0] + (1-t)u x[r0,s1] + t(1-u) x[r1,s0] + t u x[r1,s1].

The coordinate gradient is zero wherever the raw coordinate fell outside the
clamp range (the clamp is flat there); at exact lattice points the floor-based
cell supplies the subgradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor4, _owned


@dataclass(frozen=True)
class SampleGrid:
    """Per-sample fractional coordinates, rows and cols each (B, N, H_out, W_out)."""

    rows: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows)
        cols = np.asarray(self.cols)
        if rows.ndim != 4 or cols.ndim != 4:
            raise ShapeError(f"grid arrays must be rank 4, got {rows.ndim}/{cols.ndim}")
        if rows.shape != cols.shape:
            raise ShapeError(f"grid shape mismatch: rows {rows.shape} vs cols {cols.shape}")
        if not (np.isfinite(rows).all() and np.isfinite(cols).all()):
            raise ValueError("invalid coordinate: grid holds non-finite values")
        for name, arr in (("rows", rows), ("cols", cols)):
            if arr.flags.writeable:
                arr = arr.copy()
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.rows.shape


def _corners(x_arr: np.ndarray, grid: SampleGrid):
    """Clamp coordinates and derive corner indices, weights, and gathers."""
    b_n, c_n, h_in, w_in = x_arr.shape
    dtype = x_arr.dtype
    r = np.clip(grid.rows.astype(dtype, copy=False), dtype.type(0), dtype.type(h_in - 1))
    s = np.clip(grid.cols.astype(dtype, copy=False), dtype.type(0), dtype.type(w_in - 1))
    r0f = np.floor(r)
    s0f = np.floor(s)
    t = r - r0f
    u = s - s0f
    r0 = r0f.astype(np.int64)
    s0 = s0f.astype(np.int64)
    r1 = np.minimum(r0 + 1, h_in - 1)
    s1 = np.minimum(s0 + 1, w_in - 1)
    return r0, r1, s0, s1, t, u


def _gather(x_arr: np.ndarray, ridx: np.ndarray, sidx: np.ndarray) -> np.ndarray:
    """Gather x[b, :, ridx, sidx] for index arrays of shape (B, N, Ho, Wo)."""
    b_n, c_n, h_in, w_in = x_arr.shape
    b0, n_pts, h_out, w_out = ridx.shape
    flat = (ridx * w_in + sidx).reshape(b0, -1)
    x_flat = x_arr.reshape(b_n, c_n, h_in * w_in)
    # advanced indices at positions 0 and 2 put their broadcast shape first
    gathered = x_flat[np.arange(b_n)[:, None], :, flat]        # (B, P, C)
    return gathered.transpose(0, 2, 1).reshape(b_n, c_n, n_pts, h_out, w_out)


def bilinear_sample(x: Tensor4, grid: SampleGrid) -> np.ndarray:
    """Sample x at grid coordinates; returns (B, C, N, H_out, W_out)."""
    if grid.dims[0] != x.dims[0]:
        raise ShapeError(f"grid batch {grid.dims[0]} != input batch {x.dims[0]}")
    x_arr = x.data
    r0, r1, s0, s1, t, u = _corners(x_arr, grid)
    g00 = _gather(x_arr, r0, s0)
    g01 = _gather(x_arr, r0, s1)
    g10 = _gather(x_arr, r1, s0)
    g11 = _gather(x_arr, r1, s1)
    one = x_arr.dtype.type(1)
    w00 = ((one - t) * (one - u))[:, None]
    w01 = ((one - t) * u)[:, None]
    w10 = (t * (one - u))[:, None]
    w11 = (t * u)[:, None]
    return w00 * g00 + w01 * g01 + w10 * g10 + w11 * g11


def bilinear_backward(x: Tensor4, grid: SampleGrid, upstream: np.ndarray):
    """Gradients of sum(upstream * bilinear_sample(x, grid)).

    Returns (grad_x: Tensor4, grad_rows, grad_cols); the coordinate gradients
    are zeroed where the raw coordinate was clamped.
    """
    x_arr = x.data
    b_n, c_n, h_in, w_in = x_arr.shape
    upstream = np.asarray(upstream, dtype=x_arr.dtype)
    b0, n_pts, h_out, w_out = grid.dims
    if upstream.shape != (b_n, c_n, n_pts, h_out, w_out):
        raise ShapeError(
            f"upstream shape {upstream.shape} != {(b_n, c_n, n_pts, h_out, w_out)}")

    r0, r1, s0, s1, t, u = _corners(x_arr, grid)
    g00 = _gather(x_arr, r0, s0)
    g01 = _gather(x_arr, r0, s1)
    g10 = _gather(x_arr, r1, s0)
    g11 = _gather(x_arr, r1, s1)

    one = x_arr.dtype.type(1)
    # d(sample)/dr and d(sample)/ds per channel, then contracted with upstream
    d_dr = (one - u)[:, None] * (g10 - g00) + u[:, None] * (g11 - g01)
    d_ds = (one - t)[:, None] * (g01 - g00) + t[:, None] * (g11 - g10)
    grad_rows = (upstream * d_dr).sum(axis=1)
    grad_cols = (upstream * d_ds).sum(axis=1)

    in_rows = (grid.rows >= 0) & (grid.rows <= h_in - 1)
    in_cols = (grid.cols >= 0) & (grid.cols <= w_in - 1)
    grad_rows = np.where(in_rows, grad_rows, 0).astype(x_arr.dtype)
    grad_cols = np.where(in_cols, grad_cols, 0).astype(x_arr.dtype)

    # Scatter-add the four corner contributions into the input gradient.
    plane = h_in * w_in
    base = (np.arange(b_n, dtype=np.int64)[:, None] * c_n
            + np.arange(c_n, dtype=np.int64)[None, :]) * plane   # (B, C)
    p_tot = n_pts * h_out * w_out
    up_flat = upstream.reshape(b_n, c_n, p_tot)
    w00 = ((one - t) * (one - u)).reshape(b_n, 1, p_tot)
    w01 = ((one - t) * u).reshape(b_n, 1, p_tot)
    w10 = (t * (one - u)).reshape(b_n, 1, p_tot)
    w11 = (t * u).reshape(b_n, 1, p_tot)
    grad_flat = np.zeros(b_n * c_n * plane, dtype=np.float64)
    for weight, ridx, sidx in ((w00, r0, s0), (w01, r0, s1), (w10, r1, s0), (w11, r1, s1)):
        cell = (ridx * w_in + sidx).reshape(b_n, 1, p_tot)
        idx = (base[:, :, None] + cell).reshape(-1)
        contrib = (up_flat * weight).reshape(-1)
        grad_flat += np.bincount(idx, weights=contrib, minlength=grad_flat.size)
    grad_x = grad_flat.reshape(b_n, c_n, h_in, w_in).astype(x_arr.dtype)
    return _owned(grad_x), grad_rows, grad_cols
