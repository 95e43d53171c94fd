"""Multi-channel 3D scalar grids: normalization, interpolation, smoothing, pyramid.

Canonical memory layout
-----------------------
Volume data is a C-contiguous float64 array of shape (channels, nz, ny, nx):
channel-major, then z, y, x with x varying fastest. Voxel (x, y, z) of channel
c is ``data[c, z, y, x]``. Coordinates are 0-based and continuous with voxel
centers at integer positions. This order matches the on-disk payload order of
the NIfTI files handled in :mod:`icreg.imgio`, so serialized data is
bit-reproducible without axis shuffling.

All sampling and convolution uses clamp-to-edge (border replication): it
avoids injecting zeros that would corrupt local windowed statistics near the
volume boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GridPoint(NamedTuple):
    """Continuous voxel coordinate, 0-based, centers at integers."""

    x: float
    y: float
    z: float


def _validate_data(data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        c, z, y, x = np.unravel_index(int(np.argmin(np.isfinite(data))), data.shape)
        raise ValueError(
            f"non-finite value in channel {c} at voxel (x={x}, y={y}, z={z})"
        )
    if min(data.shape[1:]) < 2:
        raise ValueError(f"every dim must be >= 2, got dims {data.shape[:0:-1]}")


@dataclass(frozen=True)
class Volume:
    """Immutable multi-channel 3D scalar grid.

    data: (channels, nz, ny, nx) float64; a plain 3D array is promoted to one
    channel. spacing: (sx, sy, sz) in mm per voxel.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[np.newaxis]
        if arr.ndim != 4:
            raise ValueError(f"expected 3D or 4D data, got ndim={arr.ndim}")
        _validate_data(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", sp)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        c, nz, ny, nx = self.data.shape
        return (nx, ny, nz)


def normalize_channels(v: Volume) -> Volume:
    """Rescale each channel to [0, 1] by its own min/max.

    A constant (degenerate-range) channel becomes all zeros; this keeps blank
    channels deterministic instead of dividing by zero.
    """
    out = np.empty_like(v.data)
    for c in range(v.channels):
        ch = v.data[c]
        lo = ch.min()
        rng = ch.max() - lo
        if rng == 0.0:
            out[c] = 0.0
        else:
            out[c] = (ch - lo) / rng
    return Volume(out, v.spacing)


def _trilinear(grid: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a (nz, ny, nx) grid at continuous coords.

    Out-of-range coordinates are clamped to the boundary per axis.
    """
    nz, ny, nx = grid.shape
    cx = np.clip(x, 0.0, nx - 1.0)
    cy = np.clip(y, 0.0, ny - 1.0)
    cz = np.clip(z, 0.0, nz - 1.0)
    # cell index: clamp to n-2 so coordinate n-1 uses the last cell with f=1
    ix = np.minimum(cx.astype(np.int64), nx - 2)
    iy = np.minimum(cy.astype(np.int64), ny - 2)
    iz = np.minimum(cz.astype(np.int64), nz - 2)
    fx = cx - ix
    fy = cy - iy
    fz = cz - iz

    flat = grid.reshape(-1)
    base = (iz * ny + iy) * nx + ix
    sy, sz = nx, ny * nx
    c000 = flat[base]
    c001 = flat[base + 1]
    c010 = flat[base + sy]
    c011 = flat[base + sy + 1]
    c100 = flat[base + sz]
    c101 = flat[base + sz + 1]
    c110 = flat[base + sz + sy]
    c111 = flat[base + sz + sy + 1]

    w00 = c000 + fx * (c001 - c000)
    w01 = c010 + fx * (c011 - c010)
    w10 = c100 + fx * (c101 - c100)
    w11 = c110 + fx * (c111 - c110)
    v0 = w00 + fy * (w01 - w00)
    v1 = w10 + fy * (w11 - w10)
    return v0 + fz * (v1 - v0)


def _trilinear_with_grad(
    grid: np.ndarray, x: np.ndarray, y: np.ndarray, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Trilinear value and its derivative w.r.t. the sampling position.

    Returns (value, d/dx, d/dy, d/dz). The derivative is the slope of the
    containing cell; it is 0 along any axis whose coordinate was clamped,
    because the clamped sample is constant there. This is the exact derivative
    of the implemented (clamped, piecewise-linear) sampler away from cell
    boundaries.
    """
    nz, ny, nx = grid.shape
    cx = np.clip(x, 0.0, nx - 1.0)
    cy = np.clip(y, 0.0, ny - 1.0)
    cz = np.clip(z, 0.0, nz - 1.0)
    gx = ((x >= 0.0) & (x <= nx - 1.0)).astype(np.float64)
    gy = ((y >= 0.0) & (y <= ny - 1.0)).astype(np.float64)
    gz = ((z >= 0.0) & (z <= nz - 1.0)).astype(np.float64)
    ix = np.minimum(cx.astype(np.int64), nx - 2)
    iy = np.minimum(cy.astype(np.int64), ny - 2)
    iz = np.minimum(cz.astype(np.int64), nz - 2)
    fx = cx - ix
    fy = cy - iy
    fz = cz - iz

    flat = grid.reshape(-1)
    base = (iz * ny + iy) * nx + ix
    sy, sz = nx, ny * nx
    c000 = flat[base]
    c001 = flat[base + 1]
    c010 = flat[base + sy]
    c011 = flat[base + sy + 1]
    c100 = flat[base + sz]
    c101 = flat[base + sz + 1]
    c110 = flat[base + sz + sy]
    c111 = flat[base + sz + sy + 1]

    d00 = c001 - c000
    d01 = c011 - c010
    d10 = c101 - c100
    d11 = c111 - c110
    w00 = c000 + fx * d00
    w01 = c010 + fx * d01
    w10 = c100 + fx * d10
    w11 = c110 + fx * d11
    v0 = w00 + fy * (w01 - w00)
    v1 = w10 + fy * (w11 - w10)
    value = v0 + fz * (v1 - v0)

    e0 = d00 + fy * (d01 - d00)
    e1 = d10 + fy * (d11 - d10)
    ddx = (e0 + fz * (e1 - e0)) * gx
    ddy = ((w01 - w00) + fz * ((w11 - w10) - (w01 - w00))) * gy
    ddz = (v1 - v0) * gz
    return value, ddx, ddy, ddz


def trilinear_sample(v: Volume, p: GridPoint, c: int) -> float:
    """Sample channel c at continuous point p (clamped at the boundary)."""
    if not 0 <= c < v.channels:
        raise ValueError(f"channel {c} out of range (volume has {v.channels})")
    x = np.asarray(p[0], dtype=np.float64)
    y = np.asarray(p[1], dtype=np.float64)
    z = np.asarray(p[2], dtype=np.float64)
    return float(_trilinear(v.data[c], x, y, z))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1D Gaussian weights with radius ceil(3*sigma), normalized to sum 1."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1, dtype=np.float64)
    r = math.ceil(3.0 * sigma)
    k = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def _correlate1d_clamped(arr: np.ndarray, weights: np.ndarray, axis: int) -> np.ndarray:
    """1D correlation along one axis with edge-replicated borders."""
    r = len(weights) // 2
    if r == 0:
        return arr * weights[0]
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    ap = np.pad(arr, pad, mode="edge")
    view = sliding_window_view(ap, len(weights), axis=axis)
    return view @ weights


def smooth_grid(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of the trailing 3 (z, y, x) axes."""
    w = gaussian_kernel(sigma)
    if len(w) == 1:
        return grid.copy()
    out = grid
    for axis in (grid.ndim - 3, grid.ndim - 2, grid.ndim - 1):
        out = _correlate1d_clamped(out, w, axis)
    return out


def gaussian_smooth(v: Volume, sigma: float) -> Volume:
    """Separable Gaussian smoothing of every channel; sigma = 0 is identity."""
    if sigma == 0:
        return Volume(v.data, v.spacing)
    return Volume(smooth_grid(v.data, sigma), v.spacing)


def downsample(v: Volume) -> Volume:
    """One pyramid step: smooth with sigma 1.0, take every 2nd voxel, 2x spacing.

    Output dims are ceil(n/2) per axis (decimation grid starts at index 0).
    """
    nx, ny, nz = v.dims
    if min(nx, ny, nz) < 4:
        raise ValueError(f"downsample needs every dim >= 4, got {v.dims}")
    sm = smooth_grid(v.data, 1.0)
    dec = sm[:, ::2, ::2, ::2]
    sx, sy, sz = v.spacing
    return Volume(dec, (2.0 * sx, 2.0 * sy, 2.0 * sz))
