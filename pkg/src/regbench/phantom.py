"""Synthetic thorax pairs with known dense correspondence.

A geometric scene (body, lungs, branching airway, ribs, vertebrae, heart,
tumour) is rendered analytically: the moving image evaluates the scene at
inverse-deformed coordinates instead of warping the fixed image, so no
interpolation blur enters the ground truth. The deformation is the
exponential of a smoothed random velocity field and is therefore
diffeomorphic by construction.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.ndimage import gaussian_filter

from .field import (
    DisplacementField,
    VelocityField,
    exp_svf,
    identity_grid,
    jacobian_determinant,
    sample_trilinear,
)
from .volume import LabelMask, LandmarkSet, TrunkMask, Volume

__all__ = [
    "LABEL_NAMES",
    "LARGE_ORGAN_LABELS",
    "CbctConfig",
    "PhantomCase",
    "make_phantom",
    "degrade_cbct",
]

LABEL_NAMES = {
    1: "lung_right",
    2: "lung_left",
    3: "heart",
    4: "tumour",
    5: "airway",
    6: "vertebrae",
    7: "ribs",
}
LARGE_ORGAN_LABELS = (1, 2, 3)

_HU_AIR = -1000.0
_HU_LUNG = -800.0
_HU_SOFT = 40.0
_HU_HEART = 45.0
_HU_TUMOUR = 60.0
_HU_BONE = 700.0


@dataclasses.dataclass(frozen=True)
class CbctConfig:
    """Cone-beam-style degradation; the default leaves the image untouched."""

    noise_sigma: float = 0.0
    bias: float = 0.0
    contrast: float = 1.0
    fov_radius_frac: float | None = None
    ring_amplitude: float = 0.0
    ring_period: float = 9.0
    streak_amplitude: float = 0.0
    streak_count: int = 9
    fill: float = _HU_AIR
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.contrast <= 0 or self.ring_period <= 0:
            raise ValueError("invalid degradation parameters")
        if self.fov_radius_frac is not None and not 0 < self.fov_radius_frac:
            raise ValueError(f"bad FOV radius fraction {self.fov_radius_frac}")

    @staticmethod
    def typical() -> "CbctConfig":
        """A plausibly harsh but registerable degradation."""
        return CbctConfig(
            noise_sigma=35.0,
            bias=-40.0,
            contrast=0.85,
            fov_radius_frac=0.42,
            ring_amplitude=20.0,
            ring_period=9.0,
            streak_amplitude=12.0,
            streak_count=9,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(raw: dict) -> "CbctConfig":
        known = {f.name for f in dataclasses.fields(CbctConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown degradation keys {sorted(unknown)}")
        return CbctConfig(**raw)


@dataclasses.dataclass(frozen=True)
class PhantomCase:
    """One synthetic fixed/moving pair with full ground truth."""

    case_id: str
    seed: int
    fixed: Volume
    moving: Volume
    labels_fixed: LabelMask
    labels_moving: LabelMask
    trunk: TrunkMask
    landmarks: LandmarkSet
    gt_field: DisplacementField
    deform_magnitude: float
    cbct: CbctConfig | None
    attempts: int = 1


# --------------------------------------------------------------------------
# scene geometry


def _scene_spec(dims):
    d = np.asarray(dims, dtype=np.float64)
    c = (d - 1) / 2.0
    m = float(min(dims))

    def at(fx, fy, fz):
        return c + np.array([fx, fy, fz]) * d

    spec = {}
    spec["body"] = (at(0, 0, 0), np.array([0.42, 0.36, 0.48]) * d)
    spec["lung_right"] = (at(-0.17, -0.02, 0.03), np.array([0.15, 0.21, 0.30]) * d)
    spec["lung_left"] = (at(0.17, -0.02, 0.03), np.array([0.15, 0.21, 0.30]) * d)
    spec["heart"] = (at(0.01, 0.07, -0.10), np.array([0.13, 0.11, 0.14]) * d)
    spec["tumour"] = (at(0.19, -0.08, 0.12), 0.05 * m)

    carina = at(0.0, -0.02, 0.02)
    b_right = at(-0.12, -0.03, -0.05)
    b_left = at(0.12, -0.03, -0.05)
    spec["airway"] = [
        (at(0.0, -0.02, 0.34), carina, 0.028 * m),
        (carina, b_right, 0.019 * m),
        (carina, b_left, 0.019 * m),
        (b_right, at(-0.19, 0.05, -0.16), 0.012 * m),
        (b_right, at(-0.16, -0.11, -0.14), 0.012 * m),
        (b_left, at(0.19, 0.05, -0.16), 0.012 * m),
        (b_left, at(0.16, -0.11, -0.14), 0.012 * m),
    ]
    spec["airway_junctions"] = [carina, b_right, b_left]
    spec["airway_tips"] = [
        at(-0.19, 0.05, -0.16), at(-0.16, -0.11, -0.14),
        at(0.19, 0.05, -0.16), at(0.16, -0.11, -0.14),
    ]

    spec["vertebrae"] = [
        (at(0.0, -0.26, fz), 0.045 * m)
        for fz in np.linspace(-0.34, 0.34, 8)
    ]

    arcs = []
    rib_marks = []
    for fz in (-0.30, -0.15, 0.0, 0.15, 0.30):
        for lo, hi in ((110.0, 250.0), (-70.0, 70.0)):
            theta = np.radians(np.linspace(lo, hi, 19))
            pts = np.stack(
                [
                    c[0] + 0.37 * d[0] * np.cos(theta),
                    c[1] - 0.01 * d[1] + 0.31 * d[1] * np.sin(theta),
                    np.full(theta.size, c[2] + fz * d[2]),
                ],
                axis=1,
            )
            arcs.append((pts, 0.016 * m))
            if fz in (-0.15, 0.0, 0.15):
                rib_marks.append(pts[pts.shape[0] // 2])
            if fz == 0.0:
                rib_marks.extend([pts[0], pts[-1]])
    spec["ribs"] = arcs
    spec["rib_marks"] = rib_marks
    return spec


_EDGE_WIDTH = 1.2  # voxels; soft shape boundaries so sub-voxel shifts interpolate


def _smoothstep(signed_dist):
    """Occupancy in [0, 1] from a signed surface distance (negative inside)."""
    s = np.clip(0.5 - signed_dist / _EDGE_WIDTH, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _ellipsoid_dist(pts, center, semi):
    """First-order signed distance to an ellipsoid surface, in voxels."""
    rel = (pts - center) / semi
    q = np.sqrt((rel ** 2).sum(axis=1))
    grad = np.sqrt(((rel / semi) ** 2).sum(axis=1))
    grad = np.where(grad > 0, grad, 1.0 / float(min(semi)))
    return (q - 1.0) * q / grad


def _capsule_union_dist(pts, segments):
    """Distance from each point to the nearest of several capsule axes."""
    pad = max(radius for _, _, radius in segments) + 2.0 * _EDGE_WIDTH
    dist = np.full(pts.shape[0], np.inf)
    for p0, p1, radius in segments:
        lo = np.minimum(p0, p1) - pad
        hi = np.maximum(p0, p1) + pad
        box = np.all((pts >= lo) & (pts <= hi), axis=1)
        idx = np.nonzero(box)[0]
        if idx.size == 0:
            continue
        rel = pts[idx] - p0
        axis = p1 - p0
        denom = float(axis @ axis)
        if denom > 0:
            t = np.clip((rel @ axis) / denom, 0.0, 1.0)
        else:
            t = np.zeros(idx.size)
        closest = p0 + t[:, None] * axis
        d = np.sqrt(((pts[idx] - closest) ** 2).sum(axis=1)) - radius
        np.minimum.at(dist, idx, d)
    return dist


class _CosineTexture:
    """Smooth procedural intensity modulation, a sum of random plane waves.

    Evaluated at scene coordinates, so the moving render carries the same
    texture through the deformation exactly.
    """

    def __init__(self, rng, scale_vox, amplitude, wl_lo, wl_hi, n_waves):
        dirs = rng.normal(size=(n_waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        wavelengths = rng.uniform(wl_lo, wl_hi, size=n_waves) * scale_vox
        self.k = (2.0 * np.pi) * dirs / wavelengths[:, None]
        self.phase = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
        # sum of n random-phase cosines has std sqrt(n/2)
        self.scale = amplitude * np.sqrt(2.0 / n_waves)

    def __call__(self, pts):
        if pts.shape[0] == 0:
            return np.zeros(0, dtype=np.float64)
        return np.cos(pts @ self.k.T + self.phase).sum(axis=1) * self.scale


def _make_textures(seed, dims):
    """Per-tissue texture fields, deterministic in the case seed."""
    rng = np.random.default_rng([int(seed), 4242])
    m = float(min(dims))
    return {
        "soft": _CosineTexture(rng, m, 30.0, 0.06, 0.14, 8),
        "lung": _CosineTexture(rng, m, 60.0, 0.045, 0.10, 8),
        "heart": _CosineTexture(rng, m, 20.0, 0.06, 0.12, 6),
        "tumour": _CosineTexture(rng, m, 15.0, 0.05, 0.10, 4),
        "bone": _CosineTexture(rng, m, 80.0, 0.05, 0.10, 6),
    }


def _blend(intensity, label, pts, alpha, hu, tex, lab_id):
    """Alpha-composite one structure over the running render."""
    idx = np.nonzero(alpha > 1e-3)[0]
    if idx.size == 0:
        return
    value = np.full(idx.size, hu, dtype=np.float64)
    if tex is not None:
        value += tex(pts[idx])
    a = alpha[idx]
    intensity[idx] = intensity[idx] * (1.0 - a) + a * value
    if lab_id:
        label[idx[a > 0.5]] = lab_id


def _render_scene(pts: np.ndarray, dims, textures=None):
    """Evaluate scene intensity and label at arbitrary voxel coordinates."""
    spec = _scene_spec(dims)
    tex = textures or {}
    n = pts.shape[0]
    intensity = np.full(n, _HU_AIR, dtype=np.float64)
    label = np.zeros(n, dtype=np.uint16)

    body_alpha = _smoothstep(_ellipsoid_dist(pts, *spec["body"]))
    _blend(intensity, label, pts, body_alpha, _HU_SOFT, tex.get("soft"), 0)

    for name, lab in (("lung_right", 1), ("lung_left", 2)):
        alpha = _smoothstep(_ellipsoid_dist(pts, *spec[name]))
        _blend(intensity, label, pts, alpha, _HU_LUNG, tex.get("lung"), lab)

    alpha = _smoothstep(_ellipsoid_dist(pts, *spec["heart"]))
    _blend(intensity, label, pts, alpha, _HU_HEART, tex.get("heart"), 3)

    alpha = _smoothstep(_capsule_union_dist(pts, spec["airway"]))
    _blend(intensity, label, pts, alpha, _HU_AIR, None, 5)

    t_center, t_radius = spec["tumour"]
    d = np.sqrt(((pts - t_center) ** 2).sum(axis=1)) - t_radius
    _blend(intensity, label, pts, _smoothstep(d), _HU_TUMOUR, tex.get("tumour"), 4)

    vert = [(center, center, radius) for center, radius in spec["vertebrae"]]
    alpha = _smoothstep(_capsule_union_dist(pts, vert))
    _blend(intensity, label, pts, alpha, _HU_BONE, tex.get("bone"), 6)

    segments = []
    for arc_pts, radius in spec["ribs"]:
        segments.extend(
            (arc_pts[k], arc_pts[k + 1], radius)
            for k in range(arc_pts.shape[0] - 1)
        )
    alpha = _smoothstep(_capsule_union_dist(pts, segments))
    _blend(intensity, label, pts, alpha, _HU_BONE, tex.get("bone"), 7)

    return intensity.astype(np.float32), label, body_alpha > 0.5


def _scene_landmarks(dims) -> np.ndarray:
    spec = _scene_spec(dims)
    marks = list(spec["airway_junctions"]) + list(spec["airway_tips"])
    marks.append(spec["tumour"][0])
    marks.extend(center for center, _ in spec["vertebrae"][1::2])
    marks.extend(spec["rib_marks"])
    return np.asarray(marks, dtype=np.float64)


# --------------------------------------------------------------------------
# deformation and assembly


def _random_velocity(rng, dims, magnitude, landmarks):
    """Smoothed white noise scaled so the landmark-mean speed is ``magnitude``.

    The kernel is wide (sigma = dims/4): respiratory-scale motion is
    coherent, and anything rougher cannot keep the log-Jacobian spread of
    the exponentiated field below 0.2 at displacements of several voxels.
    Normalising at the landmark positions pins the initial misalignment the
    evaluator will report, independent of the random draw.
    """
    sigma = [d / 4.0 for d in dims]
    raw = rng.standard_normal(size=tuple(dims) + (3,))
    smooth = np.stack(
        [gaussian_filter(raw[..., c], sigma) for c in range(3)], axis=-1
    )
    at_marks = sample_trilinear(smooth.astype(np.float32), landmarks)
    mean_mag = float(np.linalg.norm(at_marks, axis=1).mean())
    if mean_mag <= 0:
        raise RuntimeError("degenerate random velocity draw")
    return smooth * (magnitude / mean_mag)


def make_phantom(seed: int, dims=(96, 96, 96), spacing=(1.5, 1.5, 1.5),
                 deform_magnitude: float = 5.0,
                 cbct: CbctConfig | None = None,
                 case_id: str | None = None) -> PhantomCase:
    """Build one reproducible fixed/moving pair with ground truth.

    The ground-truth field maps fixed-grid coordinates into the moving
    image (pull-back); landmarks are scene features carried through the
    exact transform. If the random deformation folds (minimum Jacobian
    determinant <= 0.05) the amplitude is reduced by 20% and redrawn.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 48:
        raise ValueError(f"phantom dims must be >= 48 per axis, got {dims}")
    if deform_magnitude < 0 or deform_magnitude > min(dims) / 8:
        raise ValueError(
            f"deform magnitude {deform_magnitude} outside [0, {min(dims) / 8}]"
        )
    case_id = case_id or f"case_{seed:03d}"
    rng = np.random.default_rng(seed)
    textures = _make_textures(seed, dims)

    grid = identity_grid(dims).reshape(-1, 3).astype(np.float64)
    fixed_intensity, fixed_label, body = _render_scene(grid, dims, textures)
    fixed = Volume(fixed_intensity.reshape(dims), spacing)
    labels_fixed = LabelMask(fixed_label.reshape(dims).astype(np.int64), spacing)
    trunk = TrunkMask(body.reshape(dims), spacing)

    scene_marks = _scene_landmarks(dims)
    attempts = 0
    magnitude = float(deform_magnitude)
    while True:
        attempts += 1
        if deform_magnitude == 0:
            u = np.zeros(dims + (3,), dtype=np.float32)
            gt = DisplacementField(u, spacing)
            gt_inv = gt
            break
        v = _random_velocity(rng, dims, magnitude, scene_marks)
        vel = VelocityField(v.astype(np.float32), spacing)
        gt = exp_svf(vel)
        interior = jacobian_determinant(gt)[1:-1, 1:-1, 1:-1]
        if interior.min() > 0.05:
            gt_inv = exp_svf(VelocityField(-vel.u, spacing))
            break
        if attempts >= 8:
            raise RuntimeError(
                f"could not draw a fold-free deformation at magnitude {magnitude}"
            )
        magnitude *= 0.8

    if deform_magnitude == 0:
        moving = fixed
        labels_moving = labels_fixed
    else:
        coords = grid + gt_inv.u.reshape(-1, 3)
        mov_intensity, mov_label, _ = _render_scene(coords, dims, textures)
        moving = Volume(mov_intensity.reshape(dims), spacing)
        labels_moving = LabelMask(mov_label.reshape(dims).astype(np.int64), spacing)

    if cbct is not None:
        moving = degrade_cbct(moving, cbct, rng=np.random.default_rng([seed, 9001]))

    marks = scene_marks
    disp = sample_trilinear(gt.u, marks).astype(np.float64)
    moving_marks = marks + disp
    margin = 2.0
    hi = np.asarray(dims, dtype=np.float64) - 1 - margin
    ok = np.all((marks >= margin) & (marks <= hi), axis=1)
    ok &= np.all((moving_marks >= margin) & (moving_marks <= hi), axis=1)
    if ok.sum() < 4:
        raise RuntimeError("deformation pushed almost all landmarks out of volume")
    landmarks = LandmarkSet(marks[ok], moving_marks[ok])

    return PhantomCase(
        case_id=case_id,
        seed=int(seed),
        fixed=fixed,
        moving=moving,
        labels_fixed=labels_fixed,
        labels_moving=labels_moving,
        trunk=trunk,
        landmarks=landmarks,
        gt_field=gt,
        deform_magnitude=float(deform_magnitude),
        cbct=cbct,
        attempts=attempts,
    )


def degrade_cbct(v: Volume, cfg: CbctConfig, rng=None) -> Volume:
    """Apply cone-beam-style artefacts; a default config is the identity.

    Order: contrast compression, bias, ring and streak overlays, additive
    Gaussian noise, then the cylindrical field-of-view crop so cropped
    voxels hold exactly the fill value.
    """
    data = v.data.astype(np.float32, copy=True)
    nx, ny, _ = v.dims
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    xs = (np.arange(nx, dtype=np.float32) - cx)[:, None, None]
    ys = (np.arange(ny, dtype=np.float32) - cy)[None, :, None]

    if cfg.contrast != 1.0:
        mean = float(data.mean())
        data = mean + (data - mean) * np.float32(cfg.contrast)
    if cfg.bias != 0.0:
        data += np.float32(cfg.bias)
    if cfg.ring_amplitude != 0.0:
        r = np.sqrt(xs ** 2 + ys ** 2)
        data += np.float32(cfg.ring_amplitude) * np.sin(
            2.0 * np.pi * r / np.float32(cfg.ring_period)
        )
    if cfg.streak_amplitude != 0.0:
        theta = np.arctan2(ys, xs)
        data += np.float32(cfg.streak_amplitude) * np.cos(cfg.streak_count * theta)
    if cfg.noise_sigma > 0.0:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        data += rng.normal(0.0, cfg.noise_sigma, size=data.shape).astype(np.float32)
    if cfg.fov_radius_frac is not None:
        radius = cfg.fov_radius_frac * min(nx, ny)
        outside = (xs ** 2 + ys ** 2) > radius * radius
        data = np.where(outside, np.float32(cfg.fill), data)
    return Volume(data, v.spacing, v.origin)
