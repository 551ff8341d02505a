"""Benchmarking toolkit for deformable volumetric registration.

Provides lightweight NIfTI I/O, displacement-field algebra, the standard
evaluation metrics (TRE, Dice, HD95, Jacobian regularity, runtime), a
significance-aware ranking scheme, a classical keypoint registrar and a
synthetic thorax phantom generator for end-to-end testing.
"""
from .volume import (
    Volume,
    LabelMask,
    TrunkMask,
    LandmarkSet,
    resample,
    crop_pad,
    clamp_intensity,
)
from .nifti import (
    NiftiError,
    UnsupportedNiftiError,
    TruncatedNiftiError,
    read_nifti,
    read_label_mask,
    read_trunk_mask,
    write_nifti,
)
from .field import (
    DisplacementField,
    VelocityField,
    SparseDisplacements,
    BandLimitedField,
    DegenerateConfigurationError,
    identity_grid,
    sample_trilinear,
    sample_nearest,
    warp,
    warp_labels,
    compose,
    jacobian_determinant,
    sdlogj,
    exp_svf,
    sqrt_field,
    tsc_compose,
    inverse_consistency_error,
    bandlimited_to_dense,
    dense_to_bandlimited,
    tps_densify,
    smooth_field,
    read_field,
    write_field,
    read_field_raw,
    write_field_raw,
)
from .features import (
    KeypointSet,
    DescriptorVolume,
    foerstner_keypoints,
    mind_descriptor,
    descriptor_ssd,
)
from .metrics import (
    METRIC_COLUMNS,
    MissingLabelError,
    CaseMetrics,
    CaseRecord,
    MetricTable,
    tre,
    robustness_percentile,
    dice,
    hd95,
    evaluate_case,
    read_metric_csv,
    write_metric_csv,
)
from .ranking import (
    WilcoxonResult,
    wilcoxon_signed_rank,
    pairwise_wins,
    rank_score,
    overall_rank,
    RankConfig,
    Leaderboard,
    LeaderboardEntry,
    build_leaderboard,
)
from .phantom import (
    LABEL_NAMES,
    LARGE_ORGAN_LABELS,
    CbctConfig,
    PhantomCase,
    make_phantom,
    degrade_cbct,
)
from .register import (
    RegistrationConfig,
    RegistrationError,
    DivergenceError,
    CostTensor,
    RunReport,
    discrete_match,
    coupled_select,
    objective_and_gradient,
    instance_optimize,
    register_pair,
)

__version__ = "0.1.0"

__all__ = [
    "Volume", "LabelMask", "TrunkMask", "LandmarkSet",
    "resample", "crop_pad", "clamp_intensity",
    "NiftiError", "UnsupportedNiftiError", "TruncatedNiftiError",
    "read_nifti", "read_label_mask", "read_trunk_mask", "write_nifti",
    "DisplacementField", "VelocityField", "SparseDisplacements",
    "BandLimitedField", "DegenerateConfigurationError",
    "identity_grid", "sample_trilinear", "sample_nearest",
    "warp", "warp_labels", "compose",
    "jacobian_determinant", "sdlogj",
    "exp_svf", "sqrt_field", "tsc_compose", "inverse_consistency_error",
    "bandlimited_to_dense", "dense_to_bandlimited",
    "tps_densify", "smooth_field",
    "read_field", "write_field", "read_field_raw", "write_field_raw",
    "KeypointSet", "DescriptorVolume",
    "foerstner_keypoints", "mind_descriptor", "descriptor_ssd",
    "METRIC_COLUMNS", "MissingLabelError",
    "CaseMetrics", "CaseRecord", "MetricTable",
    "tre", "robustness_percentile", "dice", "hd95",
    "evaluate_case", "read_metric_csv", "write_metric_csv",
    "WilcoxonResult", "wilcoxon_signed_rank", "pairwise_wins",
    "rank_score", "overall_rank",
    "RankConfig", "Leaderboard", "LeaderboardEntry", "build_leaderboard",
    "LABEL_NAMES", "LARGE_ORGAN_LABELS",
    "CbctConfig", "PhantomCase", "make_phantom", "degrade_cbct",
    "RegistrationConfig", "RegistrationError", "DivergenceError",
    "CostTensor", "RunReport",
    "discrete_match", "coupled_select", "objective_and_gradient",
    "instance_optimize", "register_pair",
    "__version__",
]
