"""Registration quality metrics and per-case evaluation records."""
from __future__ import annotations

import csv
import dataclasses

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt

from .field import DisplacementField, sample_trilinear, sdlogj, warp_labels
from .volume import LabelMask, LandmarkSet, TrunkMask

__all__ = [
    "MissingLabelError",
    "CaseMetrics",
    "CaseRecord",
    "MetricTable",
    "tre",
    "robustness_percentile",
    "dice",
    "hd95",
    "evaluate_case",
    "write_metric_csv",
    "read_metric_csv",
]

# scalar columns shared by the CSV table and the ranking engine
METRIC_COLUMNS = ("tre", "tre30", "dsc", "dsc30", "hd95", "sdlogj", "runtime")


class MissingLabelError(ValueError):
    """A requested label is absent from one of the masks."""


def tre(lms: LandmarkSet, field: DisplacementField, spacing=None) -> np.ndarray:
    """Per-landmark target registration error in millimetres.

    For each pair, the fixed point is mapped through the field and compared
    with the moving point; the residual is scaled per-axis by ``spacing``.
    """
    if len(lms) == 0:
        raise ValueError("landmark set is empty")
    sp = np.asarray(spacing if spacing is not None else field.spacing, dtype=np.float64)
    dims = np.asarray(field.dims)
    fp, mp = lms.fixed_points, lms.moving_points
    for name, pts in (("fixed", fp), ("moving", mp)):
        bad = np.nonzero((pts < 0) | (pts > dims - 1))[0]
        if bad.size:
            raise ValueError(
                f"{name} landmark {int(bad[0])} at {pts[bad[0]].tolist()} lies "
                f"outside the {tuple(int(d) for d in dims)} grid"
            )
    u = sample_trilinear(field.u, fp.astype(np.float64)).astype(np.float64)
    residual = (fp + u - mp) * sp
    return np.linalg.norm(residual, axis=1)


def robustness_percentile(values, p: float, higher_is_better: bool = False,
                          tail: str = "worst") -> float:
    """Linearly interpolated percentile along a worst-first (or best-first) sort.

    With the default worst-first convention, p = 30 reads the boundary of
    the worst 30% of the values; p = 50 is the median either way.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("cannot take a percentile of no values")
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    if tail not in ("worst", "best"):
        raise ValueError(f"tail must be 'worst' or 'best', got {tail!r}")
    descending = (not higher_is_better) == (tail == "worst")
    ordered = np.sort(vals)
    if descending:
        ordered = ordered[::-1]
    pos = (vals.size - 1) * (p / 100.0)
    lo = int(np.floor(pos))
    hi = min(lo + 1, vals.size - 1)
    frac = pos - lo
    return float(ordered[lo] + (ordered[hi] - ordered[lo]) * frac)


def dice(a: LabelMask, b: LabelMask) -> dict[int, float]:
    """Per-label Dice overlap over the union of label sets.

    A label present in only one mask scores 0 for that label.
    """
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")
    ids = sorted(set(a.label_ids()) | set(b.label_ids()))
    out = {}
    for lab in ids:
        ma = a.labels == lab
        mb = b.labels == lab
        denom = int(ma.sum()) + int(mb.sum())
        inter = int(np.logical_and(ma, mb).sum())
        out[lab] = 2.0 * inter / denom if denom else 0.0
    return out


def _boundary(mask: np.ndarray) -> np.ndarray:
    # 6-connected erosion; the volume border counts as outside
    struct = np.zeros((3, 3, 3), dtype=bool)
    struct[1, 1, 1] = True
    struct[0, 1, 1] = struct[2, 1, 1] = True
    struct[1, 0, 1] = struct[1, 2, 1] = True
    struct[1, 1, 0] = struct[1, 1, 2] = True
    return mask & ~binary_erosion(mask, structure=struct, border_value=0)


def _directed_distances(from_pts: np.ndarray, target_boundary: np.ndarray,
                        spacing: np.ndarray) -> np.ndarray:
    """Distance from each point to its nearest target-boundary voxel.

    Nearest voxels come from the Euclidean distance transform; distances
    are then recomputed from the returned indices so the arithmetic matches
    an explicit all-pairs search digit for digit.
    """
    idx = distance_transform_edt(~target_boundary, sampling=spacing,
                                 return_distances=False, return_indices=True)
    nearest = idx[:, from_pts[:, 0], from_pts[:, 1], from_pts[:, 2]].T
    delta = (from_pts - nearest) * spacing
    return np.sqrt((delta ** 2).sum(axis=1))


def hd95(a: LabelMask, b: LabelMask, label: int, spacing=None) -> float:
    """95th percentile of symmetric boundary distances for one label, in mm."""
    if a.dims != b.dims:
        raise ValueError(f"mask dims differ: {a.dims} vs {b.dims}")
    for name, mask in (("first", a), ("second", b)):
        if label not in mask.label_ids():
            raise MissingLabelError(f"label {label} missing from {name} mask")
    sp = np.asarray(spacing if spacing is not None else a.spacing, dtype=np.float64)
    ba = _boundary(a.labels == label)
    bb = _boundary(b.labels == label)
    pa = np.argwhere(ba)
    pb = np.argwhere(bb)
    d_ab = _directed_distances(pa, bb, sp)
    d_ba = _directed_distances(pb, ba, sp)
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, 95))


@dataclasses.dataclass(frozen=True)
class CaseMetrics:
    """Full evaluation detail for one (method, case) pair."""

    case_id: str
    method_id: str
    tre_mm: np.ndarray
    dice_by_label: dict[int, float]
    hd95_by_label: dict[int, float]
    sdlogj: float
    runtime_s: float
    excluded_labels: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "tre_mm", np.ascontiguousarray(self.tre_mm, dtype=np.float64)
        )

    @property
    def tre_mean(self) -> float:
        return float(self.tre_mm.mean())

    @property
    def tre30(self) -> float:
        """Worst-30% boundary of the per-landmark errors."""
        return robustness_percentile(self.tre_mm, 30, higher_is_better=False)

    def _shared_dice(self) -> list[float]:
        keys = [k for k in self.dice_by_label if k not in self.excluded_labels]
        return [self.dice_by_label[k] for k in keys]

    @property
    def dsc_mean(self) -> float:
        vals = self._shared_dice()
        return float(np.mean(vals)) if vals else 0.0

    @property
    def dsc30(self) -> float:
        vals = self._shared_dice()
        if not vals:
            return 0.0
        return robustness_percentile(vals, 30, higher_is_better=True)

    @property
    def hd95_mean(self) -> float:
        vals = list(self.hd95_by_label.values())
        return float(np.mean(vals)) if vals else float("nan")

    def to_record(self) -> "CaseRecord":
        return CaseRecord(
            method=self.method_id,
            case=self.case_id,
            values={
                "tre": self.tre_mean,
                "tre30": self.tre30,
                "dsc": self.dsc_mean,
                "dsc30": self.dsc30,
                "hd95": self.hd95_mean,
                "sdlogj": self.sdlogj,
                "runtime": self.runtime_s,
            },
            excluded=len(self.excluded_labels),
        )


@dataclasses.dataclass(frozen=True)
class CaseRecord:
    """Scalar per-case metric values; the unit the ranking engine consumes."""

    method: str
    case: str
    values: dict[str, float]
    excluded: int = 0


@dataclasses.dataclass(frozen=True)
class MetricTable:
    """Collection of per-case records for one or more methods."""

    records: tuple[CaseRecord, ...]

    def __post_init__(self):
        recs = tuple(self.records)
        seen = set()
        for r in recs:
            key = (r.method, r.case)
            if key in seen:
                raise ValueError(f"duplicate record for method/case {key}")
            seen.add(key)
        object.__setattr__(self, "records", recs)

    def methods(self) -> list[str]:
        out = []
        for r in self.records:
            if r.method not in out:
                out.append(r.method)
        return out

    def cases(self, method: str) -> list[str]:
        return sorted(r.case for r in self.records if r.method == method)

    def value(self, method: str, case: str, metric: str) -> float:
        for r in self.records:
            if r.method == method and r.case == case:
                return r.values[metric]
        raise KeyError(f"no record for method {method!r}, case {case!r}")

    def series(self, method: str, metric: str) -> np.ndarray:
        """Metric values for one method, ordered by sorted case id."""
        return np.asarray(
            [self.value(method, c, metric) for c in self.cases(method)],
            dtype=np.float64,
        )

    def require_common_cases(self) -> list[str]:
        """Case ids shared by all methods; raises naming any gaps."""
        methods = self.methods()
        if not methods:
            raise ValueError("metric table is empty")
        case_sets = {m: set(self.cases(m)) for m in methods}
        union = set.union(*case_sets.values())
        missing = [
            (m, c) for m in methods for c in sorted(union - case_sets[m])
        ]
        if missing:
            raise ValueError(f"methods disagree on case coverage; missing {missing}")
        return sorted(union)


def evaluate_case(case_id: str, method_id: str, fixed_labels: LabelMask,
                  moving_labels: LabelMask, lms: LandmarkSet,
                  field: DisplacementField, trunk: TrunkMask,
                  runtime_s: float = 0.0) -> CaseMetrics:
    """Score one registration result against its ground-truth annotations.

    Moving labels are warped onto the fixed grid with nearest-neighbour
    interpolation. Labels absent from either side are reported with Dice 0
    in the detail map but excluded from surface distances and aggregates.
    """
    if fixed_labels.dims != field.dims:
        raise ValueError(
            f"fixed label dims {fixed_labels.dims} differ from field dims {field.dims}"
        )
    warped = warp_labels(moving_labels, field)
    dsc = dice(fixed_labels, warped)
    shared = sorted(set(fixed_labels.label_ids()) & set(warped.label_ids()))
    excluded = tuple(k for k in dsc if k not in shared)
    hd = {lab: hd95(fixed_labels, warped, lab) for lab in shared}
    errors = tre(lms, field)
    sd = sdlogj(field, trunk)
    return CaseMetrics(
        case_id=case_id,
        method_id=method_id,
        tre_mm=errors,
        dice_by_label=dsc,
        hd95_by_label=hd,
        sdlogj=sd,
        runtime_s=runtime_s,
        excluded_labels=excluded,
    )


def write_metric_csv(records, path) -> None:
    """One row per (method, case) with the scalar metric columns."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "case", *METRIC_COLUMNS, "excluded_labels"])
        for r in records:
            writer.writerow(
                [r.method, r.case]
                + [f"{r.values[m]:.9g}" for m in METRIC_COLUMNS]
                + [r.excluded]
            )


def read_metric_csv(path) -> MetricTable:
    records = []
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expect = ["method", "case", *METRIC_COLUMNS, "excluded_labels"]
        if header != expect:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(expect):
                raise ValueError(f"{path}: malformed row {row!r}")
            values = {m: float(row[2 + i]) for i, m in enumerate(METRIC_COLUMNS)}
            records.append(
                CaseRecord(method=row[0], case=row[1], values=values,
                           excluded=int(row[-1]))
            )
    return MetricTable(tuple(records))
