"""Keypoint-driven deformable registration.

Pipeline: clamp intensities, compute self-similarity descriptors, detect
corner keypoints on the fixed image, exhaustively match each keypoint over
a quantised displacement grid, smooth the matches by coupled selection,
densify with a thin-plate spline, refine with first-order instance
optimisation at half resolution, and box-smooth the result.
"""
from __future__ import annotations

import dataclasses
import json
import time

import numpy as np
from scipy.spatial import cKDTree

from .features import DescriptorVolume, KeypointSet, foerstner_keypoints, mind_descriptor
from .field import (
    DisplacementField,
    SparseDisplacements,
    identity_grid,
    sample_trilinear,
    smooth_field,
    tps_densify,
)
from .volume import TrunkMask, Volume, clamp_intensity, resample

__all__ = [
    "RegistrationError",
    "DivergenceError",
    "RegistrationConfig",
    "CostTensor",
    "RunReport",
    "discrete_match",
    "coupled_select",
    "instance_optimize",
    "objective_and_gradient",
    "register_pair",
]


class RegistrationError(RuntimeError):
    """The pipeline could not produce a usable field."""


class DivergenceError(RegistrationError):
    """The optimiser hit a non-finite objective."""

    def __init__(self, iteration: int):
        super().__init__(f"non-finite objective at iteration {iteration}")
        self.iteration = iteration


@dataclasses.dataclass(frozen=True)
class RegistrationConfig:
    """All pipeline knobs with working defaults.

    Intensities are clamped to [clamp_lo, clamp_hi] before anything else;
    the default window keeps lung contrast while suppressing metal-bright
    outliers. ``io_lr`` is an Adam step in voxels.
    """

    clamp_lo: float = -1000.0
    clamp_hi: float = 2048.0
    kp_sigma: float = 1.4
    kp_nms_radius: int = 3
    kp_max_count: int = 2048
    desc_patch_radius: int = 1
    desc_dilation: int = 2
    search_radius: int = 8
    quantization: int = 1
    coupling_alpha: float = 0.05
    coupling_iters: int = 4
    coupling_neighbours: int = 10
    tps_lambda: float = 0.1
    io_enabled: bool = True
    io_iters: int = 150
    io_lr: float = 0.1
    io_reg_weight: float = 0.4
    io_step_halving: bool = True
    smooth_window: int = 3
    smooth_repeats: int = 2

    def __post_init__(self):
        if self.clamp_lo > self.clamp_hi:
            raise ValueError("clamp_lo above clamp_hi")
        if self.search_radius < self.quantization or self.quantization < 1:
            raise ValueError("need search_radius >= quantization >= 1")
        if self.search_radius % self.quantization:
            raise ValueError("search_radius must be a multiple of quantization")
        if self.coupling_alpha < 0 or self.coupling_iters < 1:
            raise ValueError("invalid coupling parameters")
        if self.io_iters < 0 or self.io_lr <= 0 or self.io_reg_weight < 0:
            raise ValueError("invalid instance-optimisation parameters")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be odd")
        if self.smooth_repeats < 0:
            raise ValueError("smooth_repeats must be >= 0")

    @staticmethod
    def from_json(path) -> "RegistrationConfig":
        with open(path, "r", encoding="ascii") as fh:
            raw = json.load(fh)
        if raw.pop("schema_version", None) != 1:
            raise ValueError(f"{path}: missing or unsupported schema_version")
        known = {f.name for f in dataclasses.fields(RegistrationConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        return RegistrationConfig(**raw)

    def to_json(self, path) -> None:
        doc = {"schema_version": 1, **dataclasses.asdict(self)}
        with open(path, "w", encoding="ascii") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


@dataclasses.dataclass(frozen=True)
class CostTensor:
    """Descriptor-SSD cost of every candidate offset for every keypoint."""

    points: np.ndarray    # (K, 3) retained keypoints
    offsets: np.ndarray   # (G, 3) candidate displacements, voxels
    costs: np.ndarray     # (K, G)
    skipped: int          # keypoints dropped for sitting too close to a border

    def __post_init__(self):
        if self.costs.shape != (self.points.shape[0], self.offsets.shape[0]):
            raise ValueError(
                f"cost shape {self.costs.shape} does not match "
                f"{self.points.shape[0]} points x {self.offsets.shape[0]} offsets"
            )
        if self.costs.size and not np.isfinite(self.costs).all():
            raise ValueError("costs contain non-finite values")
        if self.costs.size and self.costs.min() < 0:
            raise ValueError("costs must be non-negative")


@dataclasses.dataclass
class RunReport:
    """Wall-clock account of one registration."""

    case_id: str
    runtime_s: float
    stages: dict[str, float]
    n_keypoints: int
    n_matched: int
    n_skipped: int
    objective_initial: float | None = None
    objective_final: float | None = None

    def to_dict(self) -> dict:
        return {"schema_version": 1, **dataclasses.asdict(self)}


def _offset_grid(search_radius: int, quantization: int) -> np.ndarray:
    steps = np.arange(-search_radius, search_radius + 1, quantization, dtype=np.int64)
    gx, gy, gz = np.meshgrid(steps, steps, steps, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def discrete_match(fixed_desc: DescriptorVolume, moving_desc: DescriptorVolume,
                   kps: KeypointSet, search_radius: int = 8,
                   quantization: int = 2) -> CostTensor:
    """Exhaustive descriptor-SSD costs over the quantised offset grid.

    Keypoints closer than ``search_radius`` to any volume face are skipped
    (counted in the result) so every candidate stays on the grid.
    """
    if fixed_desc.dims != moving_desc.dims:
        raise ValueError(
            f"descriptor dims differ: {fixed_desc.dims} vs {moving_desc.dims}"
        )
    if search_radius < quantization or quantization < 1:
        raise ValueError("need search_radius >= quantization >= 1")
    if search_radius % quantization:
        raise ValueError("search_radius must be a multiple of quantization")
    dims = np.asarray(fixed_desc.dims)
    pts = kps.points
    ok = np.all((pts >= search_radius) & (pts <= dims - 1 - search_radius), axis=1)
    kept = pts[ok]
    skipped = int(pts.shape[0] - kept.shape[0])
    offsets = _offset_grid(search_radius, quantization)

    fvals = fixed_desc.values
    mvals = moving_desc.values
    fd = fvals[kept[:, 0], kept[:, 1], kept[:, 2]].astype(np.float32)  # (K, C)
    costs = np.empty((kept.shape[0], offsets.shape[0]), dtype=np.float32)
    for g, off in enumerate(offsets):
        q = kept + off
        md = mvals[q[:, 0], q[:, 1], q[:, 2]]
        costs[:, g] = ((fd - md) ** 2).sum(axis=1)
    return CostTensor(points=kept, offsets=offsets, costs=costs, skipped=skipped)


def coupled_select(cost: CostTensor, alpha: float = 0.05,
                   iters: int = 4, neighbours: int = 10) -> SparseDisplacements:
    """Pick one offset per keypoint, balancing cost against neighbour consensus.

    Starts from the per-keypoint argmin, then repeatedly re-selects the
    offset minimising cost + alpha * ||d - dbar||^2, where dbar is the
    inverse-distance-weighted mean displacement of the nearest keypoints
    and alpha doubles every iteration.
    """
    if alpha < 0 or iters < 1:
        raise ValueError("invalid coupling parameters")
    k = cost.points.shape[0]
    if k == 0:
        raise ValueError("cost tensor holds no keypoints")
    offsets = cost.offsets.astype(np.float64)
    chosen = offsets[np.argmin(cost.costs, axis=1)]

    if alpha > 0 and k > 1:
        n_nb = min(neighbours, k - 1)
        tree = cKDTree(cost.points.astype(np.float64))
        dist, idx = tree.query(cost.points.astype(np.float64), k=n_nb + 1)
        dist, idx = dist[:, 1:], idx[:, 1:]  # drop self
        weights = 1.0 / (dist + 1.0)
        weights /= weights.sum(axis=1, keepdims=True)
        a = float(alpha)
        for _ in range(iters):
            dbar = (weights[..., None] * chosen[idx]).sum(axis=1)
            penalty = ((offsets[None, :, :] - dbar[:, None, :]) ** 2).sum(axis=2)
            chosen = offsets[np.argmin(cost.costs + a * penalty, axis=1)]
            a *= 2.0
    return SparseDisplacements(points=cost.points.astype(np.float64), vectors=chosen)


# --------------------------------------------------------------------------
# instance optimisation


def objective_and_gradient(u: np.ndarray, fixed_vals: np.ndarray,
                           moving_vals: np.ndarray, reg_weight: float,
                           want_grad: bool = True):
    """Mean warped-descriptor SSD plus diffusion regularity.

    The similarity term averages squared channel residuals between
    moving descriptors sampled at x + u(x) and fixed descriptors at x; the
    regulariser averages squared forward differences of u. Gradients flow
    through the trilinear interpolation analytically.
    """
    dims = u.shape[:3]
    coords = identity_grid(dims) + u
    if want_grad:
        sampled, grad = sample_trilinear(moving_vals, coords, want_grad=True)
    else:
        sampled = sample_trilinear(moving_vals, coords)
    resid = sampled - fixed_vals
    n_sim = resid.size
    sim = float((resid.astype(np.float64) ** 2).sum() / n_sim)

    n_reg = sum(3 * (dims[a] - 1) * dims[(a + 1) % 3] * dims[(a + 2) % 3]
                for a in range(3))
    reg = 0.0
    if want_grad:
        g = np.einsum("...c,...ca->...a", resid, grad) * (2.0 / n_sim)
    for a in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[a] = slice(None, -1)
        sl_hi[a] = slice(1, None)
        diff = u[tuple(sl_hi)] - u[tuple(sl_lo)]
        reg += float((diff.astype(np.float64) ** 2).sum())
        if want_grad:
            scale = np.float32(2.0 * reg_weight / n_reg)
            g[tuple(sl_lo)] -= scale * diff
            g[tuple(sl_hi)] += scale * diff
    reg /= n_reg
    energy = sim + reg_weight * reg
    return (energy, g) if want_grad else energy


def instance_optimize(fixed_desc: DescriptorVolume, moving_desc: DescriptorVolume,
                      init: DisplacementField, cfg: RegistrationConfig):
    """Adam descent on the descriptor objective with monotonicity guard.

    Steps that would raise the objective are retried with a halved learning
    rate, so the recorded trace never increases; the returned field is the
    best iterate seen.
    """
    if fixed_desc.dims != moving_desc.dims or init.dims != fixed_desc.dims:
        raise ValueError(
            f"dims mismatch: fixed {fixed_desc.dims}, moving {moving_desc.dims}, "
            f"init {init.dims}"
        )
    u = init.u.astype(np.float32, copy=True)
    fvals = fixed_desc.values
    mvals = moving_desc.values
    energy, grad = objective_and_gradient(u, fvals, mvals, cfg.io_reg_weight)
    if not np.isfinite(energy):
        raise DivergenceError(0)
    trace = [energy]
    lr = float(cfg.io_lr)
    m = np.zeros_like(u)
    v = np.zeros_like(u)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for it in range(1, cfg.io_iters + 1):
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** it)
        vhat = v / (1 - b2 ** it)
        direction = mhat / (np.sqrt(vhat) + eps)
        accepted = False
        while lr >= 1e-9:
            candidate = u - np.float32(lr) * direction
            e_new = objective_and_gradient(candidate, fvals, mvals,
                                           cfg.io_reg_weight, want_grad=False)
            if not np.isfinite(e_new):
                raise DivergenceError(it)
            if not cfg.io_step_halving or e_new <= energy:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
        u = candidate
        energy, grad = objective_and_gradient(u, fvals, mvals, cfg.io_reg_weight)
        trace.append(energy)
    return DisplacementField(u, init.spacing), trace


# --------------------------------------------------------------------------
# full pipeline


def _downscale_sparse(sd: SparseDisplacements, factor: float) -> SparseDisplacements:
    return SparseDisplacements(points=sd.points * factor, vectors=sd.vectors * factor)


def _upsample_field(field: DisplacementField, dims, spacing) -> DisplacementField:
    """Resample a half-resolution field onto the full grid, rescaling vectors."""
    coords = identity_grid(dims) * np.float32(0.5)
    u = sample_trilinear(field.u, coords, mode="clamp") * np.float32(2.0)
    return DisplacementField(u, spacing)


def register_pair(fixed: Volume, moving: Volume, trunk: TrunkMask,
                  cfg: RegistrationConfig | None = None,
                  case_id: str = "case"):
    """Register ``moving`` to ``fixed``; returns (field, RunReport).

    The field lives on the fixed grid in voxel units under the pull-back
    convention. Raises RegistrationError when no usable keypoints or
    matches exist (e.g. featureless input).
    """
    cfg = cfg or RegistrationConfig()
    if fixed.dims != moving.dims or fixed.dims != trunk.dims:
        raise ValueError(
            f"dims mismatch: fixed {fixed.dims}, moving {moving.dims}, trunk {trunk.dims}"
        )
    stages: dict[str, float] = {}
    t0 = time.perf_counter()

    def tick(name, start):
        stages[name] = time.perf_counter() - start
        return time.perf_counter()

    t = t0
    fixed_c = clamp_intensity(fixed, cfg.clamp_lo, cfg.clamp_hi)
    moving_c = clamp_intensity(moving, cfg.clamp_lo, cfg.clamp_hi)
    t = tick("clamp", t)

    desc_f = mind_descriptor(fixed_c, cfg.desc_patch_radius, cfg.desc_dilation)
    desc_m = mind_descriptor(moving_c, cfg.desc_patch_radius, cfg.desc_dilation)
    t = tick("descriptors", t)

    kps = foerstner_keypoints(fixed_c, trunk, sigma=cfg.kp_sigma,
                              nms_radius=cfg.kp_nms_radius,
                              max_count=cfg.kp_max_count)
    if len(kps) == 0:
        raise RegistrationError("no keypoints detected on the fixed image")
    t = tick("keypoints", t)

    cost = discrete_match(desc_f, desc_m, kps, cfg.search_radius, cfg.quantization)
    if cost.points.shape[0] < 4:
        raise RegistrationError(
            f"only {cost.points.shape[0]} keypoints usable after border skip"
        )
    sparse = coupled_select(cost, cfg.coupling_alpha, cfg.coupling_iters,
                            cfg.coupling_neighbours)
    t = tick("matching", t)

    obj_first = obj_last = None
    if cfg.io_enabled:
        half_spacing = tuple(2.0 * s for s in fixed.spacing)
        fixed_h = resample(fixed_c, half_spacing)
        moving_h = resample(moving_c, half_spacing)
        desc_fh = mind_descriptor(fixed_h, cfg.desc_patch_radius, cfg.desc_dilation)
        desc_mh = mind_descriptor(moving_h, cfg.desc_patch_radius, cfg.desc_dilation)
        init_h = tps_densify(_downscale_sparse(sparse, 0.5), fixed_h.dims,
                             half_spacing, cfg.tps_lambda)
        t = tick("densify", t)
        field_h, trace = instance_optimize(desc_fh, desc_mh, init_h, cfg)
        obj_first, obj_last = trace[0], trace[-1]
        field = _upsample_field(field_h, fixed.dims, fixed.spacing)
        t = tick("instance_opt", t)
    else:
        field = tps_densify(sparse, fixed.dims, fixed.spacing, cfg.tps_lambda)
        t = tick("densify", t)

    field = smooth_field(field, cfg.smooth_window, cfg.smooth_repeats)
    tick("smooth", t)

    report = RunReport(
        case_id=case_id,
        runtime_s=time.perf_counter() - t0,
        stages=stages,
        n_keypoints=len(kps),
        n_matched=int(cost.points.shape[0]),
        n_skipped=cost.skipped,
        objective_initial=obj_first,
        objective_final=obj_last,
    )
    return field, report
