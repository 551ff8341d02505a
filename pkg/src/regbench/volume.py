"""Scalar volumes, label maps, masks and paired landmarks.

Conventions used throughout the package:

* voxel coordinates are (x, y, z) with ``data[x, y, z]``; x varies fastest
  on disk,
* spacing is millimetres per voxel along (x, y, z),
* the internal scalar type is float32.
"""
from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "Volume",
    "LabelMask",
    "TrunkMask",
    "LandmarkSet",
    "resample",
    "crop_pad",
    "crop_pad_offset",
    "clamp_intensity",
]


def _as_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or any(s <= 0 or not np.isfinite(s) for s in sp):
        raise ValueError(f"spacing must be 3 strictly positive values, got {spacing!r}")
    return sp


@dataclasses.dataclass(frozen=True)
class Volume:
    """A 3-D scalar image in float32 with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("volume contains non-finite intensities")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclasses.dataclass(frozen=True)
class LabelMask:
    """Integer segmentation labels on a voxel grid; 0 is background."""

    labels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"label data must be 3-D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError(f"labels must be integral, got dtype {lab.dtype}")
        if lab.size and lab.min() < 0:
            raise ValueError("labels must be non-negative")
        lab = np.ascontiguousarray(lab, dtype=np.uint16)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    def label_ids(self) -> list[int]:
        """Sorted non-zero label values present in the mask."""
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]


@dataclasses.dataclass(frozen=True)
class TrunkMask:
    """Binary region-of-interest mask (body without couch/background)."""

    mask: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {m.shape}")
        if m.dtype != np.bool_:
            vals = np.unique(m)
            if not np.all(np.isin(vals, (0, 1))):
                raise ValueError("trunk mask values must be 0/1")
        object.__setattr__(self, "mask", np.ascontiguousarray(m.astype(bool)))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.mask.shape


@dataclasses.dataclass(frozen=True)
class LandmarkSet:
    """Paired anatomical landmarks in voxel coordinates.

    Row i of ``fixed_points`` corresponds to row i of ``moving_points``.
    """

    fixed_points: np.ndarray
    moving_points: np.ndarray

    def __post_init__(self):
        fp = np.ascontiguousarray(np.atleast_2d(self.fixed_points), dtype=np.float64)
        mp = np.ascontiguousarray(np.atleast_2d(self.moving_points), dtype=np.float64)
        if fp.shape != mp.shape or fp.ndim != 2 or fp.shape[1] != 3:
            raise ValueError(
                f"landmark arrays must both be (N, 3), got {fp.shape} and {mp.shape}"
            )
        if fp.shape[0] == 0:
            raise ValueError("landmark set is empty")
        if not (np.isfinite(fp).all() and np.isfinite(mp).all()):
            raise ValueError("landmarks contain non-finite coordinates")
        object.__setattr__(self, "fixed_points", fp)
        object.__setattr__(self, "moving_points", mp)

    def __len__(self) -> int:
        return self.fixed_points.shape[0]

    @staticmethod
    def read_csv(fixed_path, moving_path) -> "LandmarkSet":
        """Load a pair of plain ``x,y,z``-per-line CSV files."""
        fp = _read_points_csv(fixed_path)
        mp = _read_points_csv(moving_path)
        if fp.shape[0] != mp.shape[0]:
            raise ValueError(
                f"landmark files disagree on count: {fixed_path} has {fp.shape[0]}, "
                f"{moving_path} has {mp.shape[0]}"
            )
        return LandmarkSet(fp, mp)

    def write_csv(self, fixed_path, moving_path) -> None:
        _write_points_csv(fixed_path, self.fixed_points)
        _write_points_csv(moving_path, self.moving_points)


def _read_points_csv(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected 'x,y,z', got {line!r}")
            rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"{path}: no landmarks found")
    return np.asarray(rows, dtype=np.float64)


def _write_points_csv(path, points: np.ndarray) -> None:
    # repr() keeps the shortest decimal string that parses back bit-exact
    with open(path, "w", encoding="ascii") as fh:
        for p in points:
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")


# --------------------------------------------------------------------------
# preprocessing operations


def _trilinear_resample_grid(data: np.ndarray, new_dims, scale) -> np.ndarray:
    """Sample ``data`` on an axis-aligned grid; edge-clamped trilinear."""
    out = data.astype(np.float32, copy=False)
    # separable: interpolate one axis at a time to keep memory flat
    for axis in range(3):
        n_in = out.shape[axis]
        coords = np.arange(new_dims[axis], dtype=np.float64) * scale[axis]
        coords = np.clip(coords, 0.0, n_in - 1)
        i0 = np.minimum(coords.astype(np.int64), max(n_in - 2, 0))
        frac = (coords - i0).astype(np.float32)
        a = np.take(out, i0, axis=axis)
        b = np.take(out, np.minimum(i0 + 1, n_in - 1), axis=axis)
        shape = [1, 1, 1]
        shape[axis] = -1
        f = frac.reshape(shape)
        out = a * (1.0 - f) + b * f
    return out


def _nearest_resample_grid(data: np.ndarray, new_dims, scale) -> np.ndarray:
    idx = []
    for axis in range(3):
        coords = np.arange(new_dims[axis], dtype=np.float64) * scale[axis]
        coords = np.clip(coords, 0.0, data.shape[axis] - 1)
        idx.append(np.rint(coords).astype(np.int64))
    return data[np.ix_(idx[0], idx[1], idx[2])]


def resample(v, new_spacing):
    """Resample a Volume (trilinear) or a label/trunk mask (nearest).

    The output grid has ``round(dims * spacing / new_spacing)`` voxels per
    axis; output voxel i lies at input coordinate ``i * new / old``, so a
    same-spacing call is an exact copy.
    """
    new_spacing = _as_spacing(new_spacing)
    if isinstance(v, Volume):
        old, data = v.spacing, v.data
    elif isinstance(v, LabelMask):
        old, data = v.spacing, v.labels
    elif isinstance(v, TrunkMask):
        old, data = v.spacing, v.mask
    else:
        raise TypeError(f"cannot resample object of type {type(v).__name__}")

    scale = [new_spacing[a] / old[a] for a in range(3)]
    new_dims = tuple(
        max(1, int(np.floor(data.shape[a] * old[a] / new_spacing[a] + 0.5)))
        for a in range(3)
    )
    if isinstance(v, Volume):
        out = _trilinear_resample_grid(data, new_dims, scale)
        return Volume(out, new_spacing, v.origin)
    out = _nearest_resample_grid(data, new_dims, scale)
    if isinstance(v, LabelMask):
        return LabelMask(out, new_spacing)
    return TrunkMask(out, new_spacing)


def crop_pad_offset(dims, target_dims) -> np.ndarray:
    """Index shift applied to coordinates by :func:`crop_pad`.

    A point at p in the input sits at ``p + offset`` in the output.
    """
    return np.asarray(
        [(int(t) - int(d)) // 2 for d, t in zip(dims, target_dims)], dtype=np.int64
    )


def crop_pad(v, target_dims, fill=0.0):
    """Center-crop or center-pad to ``target_dims``; padding takes ``fill``."""
    target_dims = tuple(int(t) for t in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be 3 positive ints, got {target_dims!r}")
    if isinstance(v, Volume):
        data = v.data
    elif isinstance(v, LabelMask):
        data = v.labels
    elif isinstance(v, TrunkMask):
        data = v.mask
    else:
        raise TypeError(f"cannot crop/pad object of type {type(v).__name__}")

    off = crop_pad_offset(data.shape, target_dims)
    out = np.full(target_dims, fill, dtype=data.dtype)
    src = []
    dst = []
    for a in range(3):
        lo = max(0, -off[a])
        hi = min(data.shape[a], target_dims[a] - off[a])
        if hi <= lo:
            raise ValueError(
                f"crop/pad windows do not overlap on axis {a}: "
                f"{data.shape} -> {target_dims}"
            )
        src.append(slice(lo, hi))
        dst.append(slice(lo + off[a], hi + off[a]))
    out[tuple(dst)] = data[tuple(src)]
    if isinstance(v, Volume):
        return Volume(out, v.spacing, v.origin)
    if isinstance(v, LabelMask):
        return LabelMask(out, v.spacing)
    return TrunkMask(out, v.spacing)


def clamp_intensity(v: Volume, lo: float, hi: float) -> Volume:
    """Clip intensities into [lo, hi].

    Either bound may be infinite to disable clipping on that side; passing
    ``-inf, inf`` returns the volume unchanged.
    """
    if np.isnan(lo) or np.isnan(hi) or lo > hi:
        raise ValueError(f"invalid clamp range [{lo}, {hi}]")
    return Volume(np.clip(v.data, lo, hi), v.spacing, v.origin)
