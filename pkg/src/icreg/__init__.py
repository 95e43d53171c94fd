"""Deformable 3D multi-channel registration by instance optimization, with
inverse-consistency-based objective weighting for missing correspondences."""

from .imgio import read_field, read_landmarks, read_nifti, write_landmarks, write_nifti
from .landmarks import Landmark, LandmarkSet
from .metrics import (
    CaseScore,
    JacobianStats,
    case_mae,
    jacobian_stats,
    landmark_distances_mm,
    robustness,
    score_table,
)
from .objective import (
    MaskStats,
    ObjectiveConfig,
    WeightMask,
    box_sum,
    box_sum_adjoint,
    diffusive_reg,
    local_ncc,
    mask_diagnostics,
    objective_gradient,
    objective_value,
    objective_value_and_gradient,
)
from .optim import AdamState, adam_step, minimize
from .pipeline import (
    CONFIG_SCHEMA,
    AffineConfig,
    IcConfig,
    NonrigidConfig,
    PipelineConfig,
    RegistrationReport,
    StageError,
    affine_register,
    apply_settings,
    ic_error_map,
    ic_weight_mask,
    load_config,
    nonrigid_register,
    parse_config_text,
    run_pipeline,
)
from .transform import (
    AffineTransform,
    DisplacementField,
    affine_to_field,
    compose,
    downsample_field,
    ic_residual,
    sample_field,
    upsample_field,
    warp,
    warp_landmarks,
    warp_positions,
)
from .volume import (
    GridPoint,
    Volume,
    downsample,
    gaussian_kernel,
    gaussian_smooth,
    normalize_channels,
    smooth_grid,
    trilinear_sample,
)

__version__ = "1.0.0"

__all__ = [
    "AdamState",
    "AffineConfig",
    "AffineTransform",
    "CaseScore",
    "CONFIG_SCHEMA",
    "DisplacementField",
    "GridPoint",
    "IcConfig",
    "JacobianStats",
    "Landmark",
    "LandmarkSet",
    "MaskStats",
    "NonrigidConfig",
    "ObjectiveConfig",
    "PipelineConfig",
    "RegistrationReport",
    "StageError",
    "Volume",
    "WeightMask",
    "adam_step",
    "affine_register",
    "affine_to_field",
    "apply_settings",
    "box_sum",
    "box_sum_adjoint",
    "case_mae",
    "compose",
    "diffusive_reg",
    "downsample",
    "downsample_field",
    "gaussian_kernel",
    "gaussian_smooth",
    "ic_error_map",
    "ic_residual",
    "ic_weight_mask",
    "jacobian_stats",
    "landmark_distances_mm",
    "load_config",
    "local_ncc",
    "mask_diagnostics",
    "minimize",
    "nonrigid_register",
    "normalize_channels",
    "objective_gradient",
    "objective_value",
    "objective_value_and_gradient",
    "parse_config_text",
    "read_field",
    "read_landmarks",
    "read_nifti",
    "robustness",
    "run_pipeline",
    "sample_field",
    "score_table",
    "smooth_grid",
    "trilinear_sample",
    "upsample_field",
    "warp",
    "warp_landmarks",
    "warp_positions",
    "write_landmarks",
    "write_nifti",
]
