"""Keypoint detection and modality-robust voxel descriptors."""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, uniform_filter

from .field import sample_trilinear
from .volume import Volume, _as_spacing

__all__ = [
    "KeypointSet",
    "DescriptorVolume",
    "foerstner_keypoints",
    "mind_descriptor",
    "descriptor_ssd",
    "read_keypoints_csv",
    "write_keypoints_csv",
]


@dataclasses.dataclass(frozen=True)
class KeypointSet:
    """Distinctive voxel locations with saliency scores, best first."""

    points: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.atleast_2d(self.points), dtype=np.int64)
        sc = np.ascontiguousarray(np.atleast_1d(self.scores), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] != sc.shape[0]:
            raise ValueError(
                f"points must be (N, 3) with matching scores, got {pts.shape} / {sc.shape}"
            )
        if sc.size and np.any(np.diff(sc) > 0):
            raise ValueError("scores must be sorted descending")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "scores", sc)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclasses.dataclass(frozen=True)
class DescriptorVolume:
    """Channel-last descriptor image aligned with its source volume."""

    values: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim != 4:
            raise ValueError(f"descriptors must be (nx, ny, nz, C), got {vals.shape}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    @property
    def channels(self) -> int:
        return self.values.shape[3]


def foerstner_keypoints(v: Volume, mask, sigma: float = 1.4, nms_radius: int = 3,
                        max_count: int = 2048) -> KeypointSet:
    """Structure-tensor corner detector.

    Saliency is det(S) / (trace(S)^2 + eps) with S the Gaussian-windowed
    outer product of intensity gradients. Candidates outside ``mask`` are
    discarded; survivors are greedily thinned so every pair is at least
    ``nms_radius`` apart in Chebyshev distance, then capped at ``max_count``.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if nms_radius < 1:
        raise ValueError(f"nms_radius must be >= 1, got {nms_radius}")
    if max_count < 1:
        raise ValueError(f"max_count must be >= 1, got {max_count}")
    m = mask.mask if hasattr(mask, "mask") else np.asarray(mask, dtype=bool)
    if m.shape != v.dims:
        raise ValueError(f"mask dims {m.shape} differ from volume dims {v.dims}")
    if not m.any():
        raise ValueError("keypoint mask is empty")

    grads = np.gradient(v.data.astype(np.float64), *v.spacing)
    tens = {}
    for a in range(3):
        for b in range(a, 3):
            tens[a, b] = gaussian_filter(grads[a] * grads[b], sigma)
    det = (
        tens[0, 0] * (tens[1, 1] * tens[2, 2] - tens[1, 2] ** 2)
        - tens[0, 1] * (tens[0, 1] * tens[2, 2] - tens[1, 2] * tens[0, 2])
        + tens[0, 2] * (tens[0, 1] * tens[1, 2] - tens[1, 1] * tens[0, 2])
    )
    trace = tens[0, 0] + tens[1, 1] + tens[2, 2]
    score = np.where(m & (det > 0), det / (trace ** 2 + 1e-12), 0.0)

    size = 2 * nms_radius + 1
    local_max = (score == maximum_filter(score, size=size)) & (score > 0)
    cand = np.argwhere(local_max)
    if cand.shape[0] == 0:
        return KeypointSet(np.empty((0, 3), dtype=np.int64), np.empty(0))
    cand_scores = score[cand[:, 0], cand[:, 1], cand[:, 2]]
    order = np.argsort(-cand_scores, kind="stable")
    cand, cand_scores = cand[order], cand_scores[order]

    cap = min(max_count, cand.shape[0])
    kept = np.empty((cap, 3), dtype=np.int64)
    kept_scores = np.empty(cap, dtype=np.float64)
    k = 0
    for p, s in zip(cand, cand_scores):
        if k and np.abs(kept[:k] - p).max(axis=1).min() < nms_radius:
            continue
        kept[k] = p
        kept_scores[k] = s
        k += 1
        if k >= max_count:
            break
    return KeypointSet(kept[:k].copy(), kept_scores[:k].copy())


# six sampling sites around a voxel (unit offsets, scaled by dilation)
_SITES = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)
# the 12 orthogonal site pairs compared by the descriptor
_SITE_PAIRS = [
    (0, 2), (0, 3), (1, 2), (1, 3),
    (0, 4), (0, 5), (1, 4), (1, 5),
    (2, 4), (2, 5), (3, 4), (3, 5),
]


def _shift_edge(arr: np.ndarray, offset) -> np.ndarray:
    """Shift so out[x] = arr[x + offset], replicating edges."""
    out = arr
    for axis, off in enumerate(offset):
        off = int(off)
        if off == 0:
            continue
        pad = [(0, 0)] * arr.ndim
        idx = [slice(None)] * arr.ndim
        if off > 0:
            pad[axis] = (0, off)
            idx[axis] = slice(off, None)
        else:
            pad[axis] = (-off, 0)
            idx[axis] = slice(None, off)
        out = np.pad(out, pad, mode="edge")[tuple(idx)]
    return out


def mind_descriptor(v: Volume, patch_radius: int = 1, dilation: int = 2) -> DescriptorVolume:
    """12-channel self-similarity-context descriptor.

    Each channel holds exp(-d / sigma) where d is the mean squared patch
    difference between two of the six dilated neighbourhood sites and sigma
    is the per-voxel mean of the twelve distances (floored at 1e-6). Values
    lie in (0, 1] and are invariant to affine intensity rescaling.
    """
    if patch_radius < 0:
        raise ValueError(f"patch_radius must be >= 0, got {patch_radius}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    need = 2 * (dilation + patch_radius) + 1
    if min(v.dims) < need:
        raise ValueError(
            f"volume dims {v.dims} smaller than descriptor neighbourhood {need}"
        )
    data = v.data
    sites = [_shift_edge(data, off) for off in _SITES * dilation]
    size = 2 * patch_radius + 1
    dists = np.empty(v.dims + (12,), dtype=np.float32)
    for c, (i, j) in enumerate(_SITE_PAIRS):
        sq = (sites[i] - sites[j]) ** 2
        dists[..., c] = uniform_filter(sq, size=size, mode="nearest") if size > 1 else sq
    sigma = np.maximum(dists.mean(axis=-1, keepdims=True), np.float32(1e-6))
    return DescriptorVolume(np.exp(-dists / sigma), v.spacing)


def descriptor_ssd(a: DescriptorVolume, p, b: DescriptorVolume, q) -> float:
    """Sum of squared channel differences between a@p and b@q.

    Fractional coordinates are sampled trilinearly; out-of-volume
    coordinates clamp to the nearest edge voxel.
    """
    if a.channels != b.channels:
        raise ValueError(f"channel counts differ: {a.channels} vs {b.channels}")
    va = sample_trilinear(a.values, np.asarray(p, dtype=np.float64))
    vb = sample_trilinear(b.values, np.asarray(q, dtype=np.float64))
    diff = va.astype(np.float64) - vb.astype(np.float64)
    return float((diff ** 2).sum())


def write_keypoints_csv(kps: KeypointSet, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for p, s in zip(kps.points, kps.scores):
            fh.write(f"{p[0]},{p[1]},{p[2]},{s:.8g}\n")


def read_keypoints_csv(path) -> KeypointSet:
    pts, scores = [], []
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}:{ln}: expected 'x,y,z,score', got {line!r}")
            pts.append([int(parts[0]), int(parts[1]), int(parts[2])])
            scores.append(float(parts[3]))
    if not pts:
        return KeypointSet(np.empty((0, 3), dtype=np.int64), np.empty(0))
    return KeypointSet(np.asarray(pts), np.asarray(scores))
