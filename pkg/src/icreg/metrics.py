"""Challenge-style evaluation: per-case landmark error, robustness ratio, and
deformation smoothness statistics.

Landmark distances are Euclidean in millimeters: coordinate deltas are in
voxels and get scaled per axis by the volume spacing before taking the norm.
The per-case error is the median distance (even count: mean of the two central
values). Robustness counts strict improvements only; ties count as not
improved.
"""

from __future__ import annotations

import warnings as _warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .landmarks import LandmarkSet
from .transform import DisplacementField


@dataclass(frozen=True)
class JacobianStats:
    fraction_nonpositive: float
    stddev: float


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    mae_mm: float
    robustness: float | None
    distances_before: tuple[float, ...] | None
    distances_after: tuple[float, ...]
    smoothness: JacobianStats | None

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "mae_mm": self.mae_mm,
            "robustness": self.robustness,
            "distances_before": None
            if self.distances_before is None
            else list(self.distances_before),
            "distances_after": list(self.distances_after),
            "smoothness": None
            if self.smoothness is None
            else {
                "fraction_nonpositive_jacobian": self.smoothness.fraction_nonpositive,
                "stddev_jacobian": self.smoothness.stddev,
            },
        }


def _paired_distances_mm(
    a: LandmarkSet, b: LandmarkSet, spacing: tuple[float, float, float] | None
) -> dict[str, float]:
    if spacing is None:
        _warnings.warn("no spacing given, assuming 1 mm per voxel", stacklevel=3)
        spacing = (1.0, 1.0, 1.0)
    sx, sy, sz = (float(s) for s in spacing)
    ids_a, ids_b = set(a.ids()), set(b.ids())
    if ids_a != ids_b:
        missing_in_b = sorted(ids_a - ids_b)
        missing_in_a = sorted(ids_b - ids_a)
        parts = []
        if missing_in_b:
            parts.append(f"missing from second set: {missing_in_b}")
        if missing_in_a:
            parts.append(f"missing from first set: {missing_in_a}")
        raise ValueError("landmark id mismatch; " + "; ".join(parts))
    out: dict[str, float] = {}
    b_map = b.by_id()
    for lm in a:
        other = b_map[lm.id]
        dx = (lm.x - other.x) * sx
        dy = (lm.y - other.y) * sy
        dz = (lm.z - other.z) * sz
        out[lm.id] = float(np.sqrt(dx * dx + dy * dy + dz * dz))
    return out


def landmark_distances_mm(
    a: LandmarkSet, b: LandmarkSet, spacing: tuple[float, float, float] | None = None
) -> dict[str, float]:
    """Per-id Euclidean distance in mm between two sets with matching ids."""
    return _paired_distances_mm(a, b, spacing)


def case_mae(
    warped_target_lm: LandmarkSet,
    source_lm: LandmarkSet,
    spacing: tuple[float, float, float] | None = None,
) -> float:
    """Median of per-landmark Euclidean distances in mm (ids must match)."""
    dists = _paired_distances_mm(warped_target_lm, source_lm, spacing)
    if not dists:
        raise ValueError("cannot compute a median of zero landmarks")
    return float(np.median(list(dists.values())))


def robustness(before: Sequence[float], after: Sequence[float]) -> float:
    """Fraction of landmarks whose distance strictly decreased."""
    b = np.asarray(before, dtype=np.float64)
    a = np.asarray(after, dtype=np.float64)
    if b.ndim != 1 or a.ndim != 1 or b.shape != a.shape:
        raise ValueError(f"before/after must be equal-length 1D, got {b.shape} / {a.shape}")
    if b.size == 0:
        raise ValueError("robustness of zero landmarks is undefined")
    return float(np.count_nonzero(a < b) / b.size)


def jacobian_stats(u: DisplacementField) -> JacobianStats:
    """Smoothness of phi(x) = x + u(x) at interior voxels.

    J(x) = det(I + grad u(x)) with central differences in voxel units;
    border voxels are excluded. Returns the fraction of interior voxels with
    J <= 0 and the standard deviation of J.
    """
    nx, ny, nz = u.dims
    if min(nx, ny, nz) < 3:
        raise ValueError(f"need dims >= 3 per axis for interior stencils, got {u.dims}")
    comps = u.components
    grad = np.empty((comps.shape[1] - 2, comps.shape[2] - 2, comps.shape[3] - 2, 3, 3))
    for d in range(3):
        for j in range(3):
            # component arrays are (z, y, x): coordinate j maps to axis 2 - j
            g = np.gradient(comps[d], axis=2 - j)
            grad[..., d, j] = g[1:-1, 1:-1, 1:-1]
    jac = grad + np.eye(3)
    det = np.linalg.det(jac)
    return JacobianStats(
        fraction_nonpositive=float(np.count_nonzero(det <= 0) / det.size),
        stddev=float(det.std()),
    )


SCORE_COLUMNS = (
    "case_id",
    "mae_mm",
    "robustness",
    "fraction_nonpositive_jacobian",
    "stddev_jacobian",
)


def score_table(scores: Sequence[CaseScore]) -> str:
    """One comma-delimited row per case in the fixed SCORE_COLUMNS order."""
    lines = [",".join(SCORE_COLUMNS)]
    for s in scores:
        rob = "" if s.robustness is None else f"{s.robustness:.6g}"
        if s.smoothness is None:
            frac, std = "", ""
        else:
            frac = f"{s.smoothness.fraction_nonpositive:.6g}"
            std = f"{s.smoothness.stddev:.6g}"
        lines.append(f"{s.case_id},{s.mae_mm:.6g},{rob},{frac},{std}")
    return "\n".join(lines) + "\n"
