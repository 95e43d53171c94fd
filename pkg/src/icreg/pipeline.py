"""Full registration pipeline: affine stage, multilevel nonrigid instance
optimization, bidirectional re-registration, inverse-consistency weight mask,
and the final weighted pass.

Optimizer parameterization: Adam works on displacements expressed in
align-corners normalized units (voxel value times 2/(n-1) per axis), while all
public fields carry voxel units. A fixed learning rate then moves points by a
resolution-independent fraction of the volume extent per step, which is what
makes the small published iteration budgets converge; the conversion lives
entirely inside the per-level loss adapters. The diffusive penalty is applied
to the same normalized-unit iterate, so one theta value carries the same
relative weight at every resolution; in voxel units the equivalent
coefficient would shrink by (n-1)^2/4.

Stage schedule (iterations, thetas, window sizes) comes from PipelineConfig;
all stages run a fixed number of iterations with no early stopping, so a full
run is deterministic at a fixed thread count.
"""

from __future__ import annotations

import time
import warnings as _warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .objective import (
    MaskStats,
    ObjectiveConfig,
    WeightMask,
    mask_diagnostics,
    objective_value_and_gradient,
    reg_value_and_gradient,
)
from .optim import minimize
from .transform import (
    AffineTransform,
    DisplacementField,
    affine_to_field,
    downsample_field,
    ic_residual,
    upsample_field,
)
from .volume import Volume, downsample, normalize_channels, smooth_grid


@dataclass(frozen=True)
class AffineConfig:
    pyramid_levels_down: int = 2
    iterations: int = 100
    lr0: float = 0.003
    ncc_window: int = 7

    def __post_init__(self) -> None:
        if self.pyramid_levels_down < 0:
            raise ValueError("pyramid_levels_down must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd and >= 3")


@dataclass(frozen=True)
class NonrigidConfig:
    levels: int = 2
    iterations: tuple[int, ...] = (40, 20)
    theta: tuple[float, ...] = (12500.0, 25000.0)
    ncc_window: int = 3
    lr0: float = 0.003

    def __post_init__(self) -> None:
        object.__setattr__(self, "iterations", tuple(int(i) for i in self.iterations))
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.iterations) != self.levels or len(self.theta) != self.levels:
            raise ValueError(
                f"iterations and theta must list one value per level "
                f"({self.levels}), got {self.iterations} / {self.theta}"
            )
        if any(i < 0 for i in self.iterations):
            raise ValueError("iterations must be >= 0")
        if any(t < 0 for t in self.theta):
            raise ValueError("theta must be >= 0")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd and >= 3")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")

    def level_weights(self) -> tuple[float, ...]:
        """Reporting weights 1/2^(N-i) for levels i = 1..N (coarse to fine)."""
        return tuple(1.0 / 2.0 ** (self.levels - i) for i in range(1, self.levels + 1))


@dataclass(frozen=True)
class IcConfig:
    bidirectional_iterations: int = 20
    sigma: float = 2.0
    power: float = 2.0
    final_iterations: int = 20
    final_theta: float = 25000.0

    def __post_init__(self) -> None:
        if self.bidirectional_iterations < 0 or self.final_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.power <= 0:
            raise ValueError("power must be > 0")
        if self.final_theta < 0:
            raise ValueError("final_theta must be >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    affine: AffineConfig = field(default_factory=AffineConfig)
    nonrigid: NonrigidConfig = field(default_factory=NonrigidConfig)
    ic: IcConfig = field(default_factory=IcConfig)


# --- flat key-value configuration ------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in text.split(","))


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(p.strip()) for p in text.split(","))


CONFIG_SCHEMA = {
    "affine.pyramid_levels_down": int,
    "affine.iterations": int,
    "affine.lr0": float,
    "affine.ncc_window": int,
    "nonrigid.levels": int,
    "nonrigid.iterations": _int_list,
    "nonrigid.theta": _float_list,
    "nonrigid.ncc_window": int,
    "nonrigid.lr0": float,
    "ic.bidirectional_iterations": int,
    "ic.sigma": float,
    "ic.power": float,
    "ic.final_iterations": int,
    "ic.final_theta": float,
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse a flat `dotted.key = value` document; '#' starts a comment."""
    settings: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        settings[key.strip()] = value.strip()
    return settings


def apply_settings(cfg: PipelineConfig, settings: dict[str, str]) -> PipelineConfig:
    """Apply flat key-value overrides; unknown keys or bad values raise."""
    staged: dict[str, dict[str, object]] = {"affine": {}, "nonrigid": {}, "ic": {}}
    for key, text in settings.items():
        caster = CONFIG_SCHEMA.get(key)
        if caster is None:
            raise ValueError(f"unknown config key {key!r}")
        section, name = key.split(".", 1)
        try:
            staged[section][name] = caster(text)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: cannot parse {text!r}") from exc
    affine = replace(cfg.affine, **staged["affine"]) if staged["affine"] else cfg.affine
    nonrigid = (
        replace(cfg.nonrigid, **staged["nonrigid"]) if staged["nonrigid"] else cfg.nonrigid
    )
    ic = replace(cfg.ic, **staged["ic"]) if staged["ic"] else cfg.ic
    return PipelineConfig(affine=affine, nonrigid=nonrigid, ic=ic)


def load_config(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


# --- report -----------------------------------------------------------------


@dataclass
class LevelRecord:
    level: int
    dims: tuple[int, int, int]
    theta: float
    iterations: int
    trace: list[float]

    @property
    def loss_first(self) -> float | None:
        return self.trace[0] if self.trace else None

    @property
    def loss_last(self) -> float | None:
        return self.trace[-1] if self.trace else None


@dataclass
class StageRecord:
    name: str
    seconds: float = 0.0
    levels: list[LevelRecord] = field(default_factory=list)

    @property
    def initial_objective(self) -> float | None:
        for rec in self.levels:
            if rec.trace:
                return rec.trace[0]
        return None

    @property
    def final_objective(self) -> float | None:
        for rec in reversed(self.levels):
            if rec.trace:
                return rec.trace[-1]
        return None


@dataclass
class RegistrationReport:
    """Per-stage objective traces, timings, mask statistics, warnings.

    Objective values come from the optimizer trace: "final" is the objective
    at the last evaluated iterate. A stage's final value is recorded, not
    asserted, to be better than its initial one.
    """

    stages: list[StageRecord] = field(default_factory=list)
    affine_matrix: list[list[float]] | None = None
    combined_multilevel_objective: float | None = None
    mask_stats: MaskStats | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {
                    "name": s.name,
                    "seconds": s.seconds,
                    "initial_objective": s.initial_objective,
                    "final_objective": s.final_objective,
                    "levels": [
                        {
                            "level": r.level,
                            "dims": list(r.dims),
                            "theta": r.theta,
                            "iterations": r.iterations,
                            "trace": r.trace,
                        }
                        for r in s.levels
                    ],
                }
                for s in self.stages
            ],
            "affine_matrix": self.affine_matrix,
            "combined_multilevel_objective": self.combined_multilevel_objective,
            "mask_stats": None
            if self.mask_stats is None
            else {
                "min": self.mask_stats.min,
                "max": self.mask_stats.max,
                "mean": self.mask_stats.mean,
                "fraction_below_half": self.mask_stats.fraction_below_half,
            },
            "warnings": list(self.warnings),
        }

    def to_text(self) -> str:
        lines = ["registration report"]
        for s in self.stages:
            first = "-" if s.initial_objective is None else f"{s.initial_objective:.6f}"
            last = "-" if s.final_objective is None else f"{s.final_objective:.6f}"
            lines.append(f"stage {s.name}: objective {first} -> {last}, {s.seconds:.2f} s")
            for r in s.levels:
                nx, ny, nz = r.dims
                lines.append(
                    f"  level {r.level} ({nx}x{ny}x{nz}): theta {r.theta:g}, "
                    f"{r.iterations} iterations"
                )
        if self.combined_multilevel_objective is not None:
            lines.append(
                f"combined multilevel objective: {self.combined_multilevel_objective:.6f}"
            )
        if self.mask_stats is not None:
            m = self.mask_stats
            lines.append(
                f"ic mask: min {m.min:.4f}, max {m.max:.4f}, mean {m.mean:.4f}, "
                f"fraction<0.5 {m.fraction_below_half:.4f}"
            )
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


# --- stages ------------------------------------------------------------------


def _norm_scale(dims: tuple[int, int, int]) -> np.ndarray:
    """Voxels per normalized unit, per component: (n-1)/2 along x, y, z."""
    nx, ny, nz = dims
    return np.array([(nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0]).reshape(3, 1, 1, 1)


def _affine_with_trace(
    S: Volume, T: Volume, cfg: AffineConfig
) -> tuple[AffineTransform, LevelRecord]:
    if S.dims != T.dims or S.channels != T.channels:
        raise ValueError(
            f"volumes must match: dims {S.dims}/{T.dims}, channels {S.channels}/{T.channels}"
        )
    for _ in range(cfg.pyramid_levels_down):
        S = downsample(S)
        T = downsample(T)
    record = LevelRecord(
        level=1, dims=S.dims, theta=0.0, iterations=cfg.iterations, trace=[]
    )

    flat_input = all(S.data[c].min() == S.data[c].max() for c in range(S.channels)) or all(
        T.data[c].min() == T.data[c].max() for c in range(T.channels)
    )
    if flat_input:
        _warnings.warn(
            "affine stage: constant input volume, returning identity", stacklevel=2
        )
        return AffineTransform.identity(), record

    nx, ny, nz = S.dims
    scale = _norm_scale(S.dims)
    # normalized coordinates q = p/s - 1 in [-1, 1] per axis
    qx = np.arange(nx, dtype=np.float64).reshape(1, 1, nx) / scale[0, 0, 0, 0] - 1.0
    qy = np.arange(ny, dtype=np.float64).reshape(1, ny, 1) / scale[1, 0, 0, 0] - 1.0
    qz = np.arange(nz, dtype=np.float64).reshape(nz, 1, 1) / scale[2, 0, 0, 0] - 1.0
    xs = np.arange(nx, dtype=np.float64).reshape(1, 1, nx)
    ys = np.arange(ny, dtype=np.float64).reshape(1, ny, 1)
    zs = np.arange(nz, dtype=np.float64).reshape(nz, 1, 1)
    ocfg = ObjectiveConfig(ncc_window=cfg.ncc_window, theta=0.0)
    sv = scale[:, 0, 0, 0]  # (3,) voxel scales
    grids = (xs, ys, zs)

    def loss_and_grad(params: np.ndarray) -> tuple[float, np.ndarray]:
        M = params.reshape(3, 4)
        comps = np.empty((3, nz, ny, nx))
        for d in range(3):
            qprime = M[d, 0] * qx + M[d, 1] * qy + M[d, 2] * qz + M[d, 3]
            comps[d] = sv[d] * (qprime + 1.0) - grids[d]
        u = DisplacementField(comps, S.spacing)
        value, gu = objective_value_and_gradient(S, T, u, ocfg)
        gM = np.empty((3, 4))
        for d in range(3):
            gM[d, 0] = sv[d] * (gu[d] * qx).sum()
            gM[d, 1] = sv[d] * (gu[d] * qy).sum()
            gM[d, 2] = sv[d] * (gu[d] * qz).sum()
            gM[d, 3] = sv[d] * gu[d].sum()
        return value, gM.reshape(-1)

    params0 = np.hstack([np.eye(3), np.zeros((3, 1))]).reshape(-1)
    params, trace = minimize(loss_and_grad, params0, cfg.iterations, cfg.lr0)
    record.trace = trace
    M = params.reshape(3, 4)

    # normalized-coordinate matrix -> voxel-coordinate [A | t] at this level
    A = np.empty((3, 4))
    for d in range(3):
        for j in range(3):
            A[d, j] = sv[d] * M[d, j] / sv[j]
        A[d, 3] = sv[d] * (M[d, 3] + 1.0 - M[d, :3].sum())
    # full-resolution coordinates: linear part unchanged, translation doubles
    A[:, 3] *= 2.0**cfg.pyramid_levels_down
    return AffineTransform(A), record


def affine_register(S: Volume, T: Volume, cfg: AffineConfig = AffineConfig()) -> AffineTransform:
    """Coarse affine stage: optimize the 12 matrix entries against -local NCC.

    Both volumes are downsampled cfg.pyramid_levels_down times; the matrix is
    optimized in align-corners normalized coordinates starting from identity,
    then converted to voxel coordinates and scaled back to full resolution
    (the linear part is scale-free; the translation doubles per level).
    Constant input volumes yield the identity with a warning.
    """
    transform, _record = _affine_with_trace(S, T, cfg)
    return transform


def _volume_pyramid(v: Volume, steps: int) -> list[Volume]:
    pyr = [v]
    for _ in range(steps):
        pyr.append(downsample(pyr[-1]))
    return pyr


def _mask_pyramid(mask: WeightMask | None, steps: int) -> list[WeightMask | None]:
    if mask is None:
        return [None] * (steps + 1)
    pyr: list[WeightMask | None] = [mask]
    cur = mask.values
    for _ in range(steps):
        sm = smooth_grid(cur[np.newaxis], 1.0)[0]
        cur = np.clip(sm[::2, ::2, ::2], 0.0, 1.0)
        pyr.append(WeightMask(cur))
    return pyr


def _nonrigid_with_trace(
    S: Volume,
    T: Volume,
    u_init: DisplacementField | None,
    cfg: NonrigidConfig,
    mask: WeightMask | None,
) -> tuple[DisplacementField, list[LevelRecord]]:
    if S.dims != T.dims or S.channels != T.channels:
        raise ValueError(
            f"volumes must match: dims {S.dims}/{T.dims}, channels {S.channels}/{T.channels}"
        )
    if u_init is not None and u_init.dims != T.dims:
        raise ValueError(f"u_init dims {u_init.dims} != volume dims {T.dims}")
    u = u_init if u_init is not None else DisplacementField.zero(T.dims, T.spacing)

    steps = cfg.levels - 1
    S_pyr = _volume_pyramid(S, steps)
    T_pyr = _volume_pyramid(T, steps)
    m_pyr = _mask_pyramid(mask, steps)
    records: list[LevelRecord] = []

    for i in range(cfg.levels):  # i = 0 is the coarsest level
        down = steps - i
        level_dims = S_pyr[down].dims
        records.append(
            LevelRecord(
                level=i + 1,
                dims=level_dims,
                theta=cfg.theta[i],
                iterations=cfg.iterations[i],
                trace=[],
            )
        )
        if cfg.iterations[i] == 0:
            # a level with no iterations must leave the field untouched, so
            # skip the downsample/upsample round trip entirely
            continue
        S_l, T_l, m_l = S_pyr[down], T_pyr[down], m_pyr[down]
        u_l = u
        for _ in range(down):
            u_l = downsample_field(u_l)
        ocfg = ObjectiveConfig(ncc_window=cfg.ncc_window, theta=0.0)
        theta = cfg.theta[i]
        scale = _norm_scale(level_dims)
        spacing_l = S_l.spacing

        def loss_and_grad(
            params: np.ndarray,
            _scale=scale, _S=S_l, _T=T_l, _m=m_l, _ocfg=ocfg, _sp=spacing_l, _th=theta,
        ):
            u_vox = DisplacementField(params * _scale, _sp)
            value, grad = objective_value_and_gradient(_S, _T, u_vox, _ocfg, _m)
            grad = grad * _scale
            if _th != 0.0:
                # regularize the normalized-unit iterate, where theta is
                # resolution-independent
                rv, rg = reg_value_and_gradient(params, _m)
                value += _th * rv
                grad += _th * rg
            return value, grad

        params0 = u_l.components / scale
        params, trace = minimize(loss_and_grad, params0, cfg.iterations[i], cfg.lr0)
        records[-1].trace = trace
        u_l = DisplacementField(params * scale, spacing_l)
        for back in range(down - 1, -1, -1):
            u_l = upsample_field(u_l, S_pyr[back].dims)
        u = u_l
    return u, records


def nonrigid_register(
    S: Volume,
    T: Volume,
    u_init: DisplacementField | None = None,
    cfg: NonrigidConfig = NonrigidConfig(),
    mask: WeightMask | None = None,
) -> DisplacementField:
    """Multilevel nonrigid instance optimization, coarse to fine.

    Each level minimizes the objective with its own theta for its fixed
    iteration count; the running field is carried at full resolution, taken
    down to each level (vectors halve per step) and back up (vectors double).
    Starts from u_init, or zero when none is given.
    """
    u, _records = _nonrigid_with_trace(S, T, u_init, cfg, mask)
    return u


def ic_error_map(u_st: DisplacementField, u_ts: DisplacementField) -> np.ndarray:
    """Per-voxel Euclidean norm of the inverse-consistency residual."""
    res = ic_residual(u_st, u_ts)
    return np.sqrt((res.components**2).sum(axis=0))


def ic_weight_mask(ic_map: np.ndarray, sigma: float, power: float) -> WeightMask:
    """Weight mask from an IC error map: normalize, power, negate, smooth.

    w = map / max(map) (all zeros if max == 0), m0 = 1 - w**power, then
    Gaussian smoothing with `sigma` and a clamp to [0, 1]. Voxels with large
    IC error (no consistent correspondence) get weights near 0.
    """
    m = np.asarray(ic_map, dtype=np.float64)
    if m.ndim != 3:
        raise ValueError(f"ic_map must be 3D, got ndim={m.ndim}")
    if m.min() < 0:
        raise ValueError("ic_map must be non-negative")
    peak = m.max()
    w = m / peak if peak > 0 else np.zeros_like(m)
    m0 = 1.0 - w**power
    sm = smooth_grid(m0[np.newaxis], sigma)[0]
    return WeightMask(np.clip(sm, 0.0, 1.0))


def run_pipeline(
    S_raw: Volume,
    T_raw: Volume,
    u_external: DisplacementField | None = None,
    cfg: PipelineConfig = PipelineConfig(),
) -> tuple[DisplacementField, RegistrationReport]:
    """Full method: normalize, affine (or external init), multilevel nonrigid,
    bidirectional registration, IC weight mask, final weighted pass.

    Returns the final source-to-target field on the target grid and a report.
    Any stage failure raises StageError naming the stage; partial results are
    discarded.
    """
    report = RegistrationReport()
    if S_raw.dims != T_raw.dims or S_raw.channels != T_raw.channels:
        raise StageError(
            "validate",
            f"volumes must match: dims {S_raw.dims}/{T_raw.dims}, "
            f"channels {S_raw.channels}/{T_raw.channels}",
        )
    for label, vol in (("moving", S_raw), ("fixed", T_raw)):
        for c in range(vol.channels):
            if vol.data[c].min() == vol.data[c].max():
                report.warnings.append(f"degenerate (constant) channel {c} in {label} volume")

    def run_stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, str(exc)) from exc
        rec = StageRecord(name=name, seconds=time.perf_counter() - t0)
        report.stages.append(rec)
        return result, rec

    (S, T), _ = run_stage(
        "normalize", lambda: (normalize_channels(S_raw), normalize_channels(T_raw))
    )

    affine: AffineTransform | None = None
    if u_external is None:

        def do_affine():
            with _warnings.catch_warnings(record=True) as wlist:
                _warnings.simplefilter("always")
                a, arec = _affine_with_trace(S, T, cfg.affine)
            for w in wlist:
                report.warnings.append(str(w.message))
            return a, arec

        (affine, affine_rec), rec = run_stage("affine", do_affine)
        rec.levels = [affine_rec]
        report.affine_matrix = [[float(x) for x in row] for row in affine.matrix]
        u0 = affine_to_field(affine, T.dims, T.spacing)
    else:
        if u_external.dims != T.dims:
            raise StageError(
                "validate", f"external field dims {u_external.dims} != volume dims {T.dims}"
            )
        report.warnings.append("affine stage skipped: external initial field supplied")
        u0 = u_external

    def do_nonrigid():
        return _nonrigid_with_trace(S, T, u0, cfg.nonrigid, None)

    (u_st, levels), rec = run_stage("nonrigid", do_nonrigid)
    rec.levels = levels
    weights = cfg.nonrigid.level_weights()
    weighted = [
        w * r.loss_last for w, r in zip(weights, levels) if r.loss_last is not None
    ]
    if weighted:
        report.combined_multilevel_objective = float(sum(weighted))

    reduced = NonrigidConfig(
        levels=1,
        iterations=(cfg.ic.bidirectional_iterations,),
        theta=(cfg.nonrigid.theta[-1],),
        ncc_window=cfg.nonrigid.ncc_window,
        lr0=cfg.nonrigid.lr0,
    )

    def do_bidirectional():
        if affine is not None:
            v_init = affine_to_field(affine.inverse(), S.dims, S.spacing)
        else:
            v_init = DisplacementField.zero(S.dims, S.spacing)
        u_ts, rev_levels = _nonrigid_with_trace(T, S, v_init, reduced, None)
        u_fwd, fwd_levels = _nonrigid_with_trace(S, T, u_st, reduced, None)
        return u_ts, u_fwd, rev_levels + fwd_levels

    (u_ts, u_st2, bid_levels), rec = run_stage("bidirectional", do_bidirectional)
    rec.levels = bid_levels

    def do_mask():
        icmap = ic_error_map(u_st2, u_ts)
        mask = ic_weight_mask(icmap, cfg.ic.sigma, cfg.ic.power)
        report.mask_stats = mask_diagnostics(mask)
        return mask

    mask, _ = run_stage("ic-mask", do_mask)

    final_cfg = NonrigidConfig(
        levels=1,
        iterations=(cfg.ic.final_iterations,),
        theta=(cfg.ic.final_theta,),
        ncc_window=cfg.nonrigid.ncc_window,
        lr0=cfg.nonrigid.lr0,
    )

    def do_final():
        return _nonrigid_with_trace(S, T, u_st2, final_cfg, mask)

    (u_final, final_levels), rec = run_stage("final", do_final)
    rec.levels = final_levels
    return u_final, report
