"""Affine transforms, displacement fields, warping, and field resampling.

Field semantics: a displacement field u lives on the TARGET grid and pulls
from the source, ``warped(x) = S(x + u(x))``. Landmarks annotated on the
target grid are therefore mapped by direct evaluation, with no field
inversion. Displacement components are stored in voxel units of the field's
own grid; conversion to mm happens only in metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .landmarks import Landmark, LandmarkSet
from .volume import Volume, _trilinear


@dataclass(frozen=True)
class AffineTransform:
    """3x4 matrix [A | t] mapping voxel coordinate p to A @ p + t."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 4):
            raise ValueError(f"affine matrix must be 3x4, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("affine matrix contains non-finite entries")
        det = float(np.linalg.det(m[:, :3]))
        if abs(det) <= 1e-9:
            raise ValueError(f"degenerate affine: |det A| = {abs(det):.3e} <= 1e-9")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.hstack([np.eye(3), np.zeros((3, 1))]))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:, 3]

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) voxel coordinates through A @ p + t."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def inverse(self) -> "AffineTransform":
        """Exact matrix inverse: x -> A^-1 (x - t)."""
        ainv = np.linalg.inv(self.linear)
        t = -ainv @ self.translation
        return AffineTransform(np.hstack([ainv, t[:, None]]))


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel 3-vector grid in voxel units of its own grid.

    components: (3, nz, ny, nx) float64, ordered (ux, uy, uz).
    """

    components: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.components, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] != 3:
            raise ValueError(f"field components must be (3, nz, ny, nx), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("displacement field contains non-finite values")
        if min(arr.shape[1:]) < 2:
            raise ValueError(f"every dim must be >= 2, got dims {arr.shape[:0:-1]}")
        arr.flags.writeable = False
        object.__setattr__(self, "components", arr)
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", sp)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        _, nz, ny, nx = self.components.shape
        return (nx, ny, nz)

    @classmethod
    def zero(cls, dims: tuple[int, int, int], spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        nx, ny, nz = dims
        return cls(np.zeros((3, nz, ny, nx)), spacing)


def _coordinate_grids(dims: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcastable (x, y, z) index grids for (nx, ny, nz) dims."""
    nx, ny, nz = dims
    xs = np.arange(nx, dtype=np.float64).reshape(1, 1, nx)
    ys = np.arange(ny, dtype=np.float64).reshape(1, ny, 1)
    zs = np.arange(nz, dtype=np.float64).reshape(nz, 1, 1)
    return xs, ys, zs


def affine_to_field(a: AffineTransform, dims: tuple[int, int, int], spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
    """Densify an affine transform: u(p) = A @ p + t - p at every grid point."""
    xs, ys, zs = _coordinate_grids(dims)
    m = a.matrix
    nx, ny, nz = dims
    comps = np.empty((3, nz, ny, nx))
    comps[0] = m[0, 0] * xs + m[0, 1] * ys + m[0, 2] * zs + m[0, 3] - xs
    comps[1] = m[1, 0] * xs + m[1, 1] * ys + m[1, 2] * zs + m[1, 3] - ys
    comps[2] = m[2, 0] * xs + m[2, 1] * ys + m[2, 2] * zs + m[2, 3] - zs
    return DisplacementField(comps, spacing)


def warp_positions(u: DisplacementField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sampling positions x + u(x) for every grid point, as (px, py, pz)."""
    xs, ys, zs = _coordinate_grids(u.dims)
    return xs + u.components[0], ys + u.components[1], zs + u.components[2]


def warp(v: Volume, u: DisplacementField) -> Volume:
    """Pull-back warp: out(c, x) = v(c, x + u(x)), trilinear with clamping."""
    if u.dims != v.dims:
        raise ValueError(f"field dims {u.dims} != volume dims {v.dims}")
    px, py, pz = warp_positions(u)
    out = np.empty_like(v.data)
    for c in range(v.channels):
        out[c] = _trilinear(v.data[c], px, py, pz)
    return Volume(out, v.spacing)


def sample_field(u: DisplacementField, px: np.ndarray, py: np.ndarray, pz: np.ndarray) -> np.ndarray:
    """Trilinearly sample all 3 components at continuous positions (clamped)."""
    return np.stack([_trilinear(u.components[d], px, py, pz) for d in range(3)])


def compose(u_outer: DisplacementField, u_inner: DisplacementField) -> DisplacementField:
    """Displacement composition: out(x) = u_inner(x) + u_outer(x + u_inner(x)).

    Warping by the result equals warping by u_inner after u_outer, i.e.
    warp(warp(S, u_outer), u_inner) == warp(S, compose(u_outer, u_inner)).
    """
    if u_outer.dims != u_inner.dims:
        raise ValueError(f"dims mismatch: {u_outer.dims} vs {u_inner.dims}")
    xs, ys, zs = _coordinate_grids(u_inner.dims)
    px = xs + u_inner.components[0]
    py = ys + u_inner.components[1]
    pz = zs + u_inner.components[2]
    return DisplacementField(u_inner.components + sample_field(u_outer, px, py, pz), u_inner.spacing)


def ic_residual(u_st: DisplacementField, u_ts: DisplacementField) -> DisplacementField:
    """Inverse-consistency residual: compose(u_st, u_ts).

    Zero everywhere iff the two fields are exact inverses; large where the
    pair has no consistent correspondence.
    """
    return compose(u_st, u_ts)


def upsample_field(u: DisplacementField, target_dims: tuple[int, int, int]) -> DisplacementField:
    """One pyramid step up: align-corners interpolation, then vectors x2.

    Each target axis must be 2n-1, 2n, or 2n+1 of the source axis. Coordinates
    map endpoint-to-endpoint (scale (target_n-1)/(source_n-1)), avoiding
    half-voxel drift across levels; values double because voxel units halve.
    """
    for tn, sn in zip(target_dims, u.dims):
        if tn not in (2 * sn - 1, 2 * sn, 2 * sn + 1):
            raise ValueError(
                f"target dims {target_dims} not one pyramid step from {u.dims}"
            )
    nx, ny, nz = target_dims
    snx, sny, snz = u.dims
    xs = np.arange(nx, dtype=np.float64).reshape(1, 1, nx) * ((snx - 1) / (nx - 1))
    ys = np.arange(ny, dtype=np.float64).reshape(1, ny, 1) * ((sny - 1) / (ny - 1))
    zs = np.arange(nz, dtype=np.float64).reshape(nz, 1, 1) * ((snz - 1) / (nz - 1))
    px = np.broadcast_to(xs, (nz, ny, nx))
    py = np.broadcast_to(ys, (nz, ny, nx))
    pz = np.broadcast_to(zs, (nz, ny, nx))
    comps = 2.0 * sample_field(u, px, py, pz)
    sx, sy, sz = u.spacing
    return DisplacementField(comps, (sx / 2.0, sy / 2.0, sz / 2.0))


def downsample_field(u: DisplacementField) -> DisplacementField:
    """One pyramid step down: decimate at even indices, halve the vectors."""
    comps = 0.5 * u.components[:, ::2, ::2, ::2]
    sx, sy, sz = u.spacing
    return DisplacementField(comps, (2.0 * sx, 2.0 * sy, 2.0 * sz))


def warp_landmarks(points: LandmarkSet, u: DisplacementField) -> tuple[LandmarkSet, tuple[str, ...]]:
    """Map landmarks by p' = p + u(p) (components sampled trilinearly).

    Points outside the field extent are sampled with clamping and reported in
    the second return value so callers can surface a warning.
    """
    nx, ny, nz = u.dims
    moved = []
    clamped = []
    for e in points:
        if not (0.0 <= e.x <= nx - 1 and 0.0 <= e.y <= ny - 1 and 0.0 <= e.z <= nz - 1):
            clamped.append(e.id)
        px = np.asarray(e.x, dtype=np.float64)
        py = np.asarray(e.y, dtype=np.float64)
        pz = np.asarray(e.z, dtype=np.float64)
        d = sample_field(u, px, py, pz)
        moved.append(Landmark(e.id, e.x + float(d[0]), e.y + float(d[1]), e.z + float(d[2])))
    return LandmarkSet(tuple(moved)), tuple(clamped)
