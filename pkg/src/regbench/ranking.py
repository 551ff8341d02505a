"""Significance-based ranking of methods from per-case metric tables.

For every metric and every pair of methods, a two-sided Wilcoxon
signed-rank test on the paired per-case values decides whether the pair is
separable; separable pairs award one win to the method with the favourable
median difference, inseparable pairs split the win. Win counts map to a
score in [0.1, 1.0] per metric and the overall score is their geometric
mean.
"""
from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .metrics import MetricTable, robustness_percentile

__all__ = [
    "WilcoxonResult",
    "RankConfig",
    "LeaderboardEntry",
    "Leaderboard",
    "wilcoxon_signed_rank",
    "pairwise_wins",
    "rank_score",
    "overall_rank",
    "build_leaderboard",
]

# display columns, in order; (table column, header, higher is better)
_DISPLAY = [
    ("tre", "TRE", False),
    ("tre30", "TRE30", False),
    ("dsc", "DSC", True),
    ("hd95", "HD95", False),
    ("sdlogj", "SDLogJ", False),
    ("runtime", "RT", False),
]

_DEFAULT_METRICS = (
    ("tre", False),
    ("tre30", False),
    ("dsc", True),
    ("hd95", False),
    ("sdlogj", False),
)


@dataclasses.dataclass(frozen=True)
class WilcoxonResult:
    statistic: float      # W+: rank sum of positive differences
    p_value: float
    n: int                # pairs remaining after zero differences dropped
    method: str           # "exact" or "approx"
    degenerate: bool = False


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sv = values[order]
    i = 0
    while i < sv.size:
        j = i
        while j + 1 < sv.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_p(doubled_ranks: np.ndarray, w2: int) -> float:
    """Two-sided tail mass of the signed-rank null via dynamic programming.

    Ranks arrive doubled so midranks stay integral; counts are exact in
    float64 up to n = 25 (2^25 << 2^53).
    """
    total2 = int(doubled_ranks.sum())
    dist = np.zeros(total2 + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        nxt = dist.copy()
        nxt[r:] += dist[: total2 + 1 - r]
        dist = nxt
    lo = min(w2, total2 - w2)
    hi = max(w2, total2 - w2)
    count = dist[: lo + 1].sum() + dist[hi:].sum()
    return min(1.0, float(count / dist.sum()))


def _approx_p(ranks: np.ndarray, w: float) -> float:
    """Normal approximation with tie-corrected variance and continuity shift."""
    n = ranks.size
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(ranks, return_counts=True)
    var -= (counts.astype(np.float64) ** 3 - counts).sum() / 48.0
    if var <= 0:
        return 1.0
    dev = abs(w - mu)
    z = max(dev - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided paired signed-rank test of ``a`` versus ``b``.

    Zero differences are dropped (all-zero input is flagged degenerate with
    p = 1). Ties share midranks. The exact null distribution is enumerated
    for up to 25 effective pairs; beyond that a tie-corrected normal
    approximation with continuity correction is used.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got {a.shape}, {b.shape}")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    d = a - b
    if not np.isfinite(d).all():
        raise ValueError("differences contain non-finite values")
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate", degenerate=True)
    if n < 5:
        raise ValueError(f"need >= 5 non-zero paired differences, got {n}")
    ranks = _midranks(np.abs(d))
    w = float(ranks[d > 0].sum())
    use_exact = method == "exact" or (method == "auto" and n <= 25)
    if use_exact:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_p(doubled, int(round(2.0 * w)))
        return WilcoxonResult(w, p, n, "exact")
    return WilcoxonResult(w, _approx_p(ranks, w), n, "approx")


def pairwise_wins(table: MetricTable, metric: str, higher_is_better: bool,
                  alpha: float = 0.05, methods=None) -> dict[str, float]:
    """Win count per method for one metric.

    A beats B when the median paired difference favours A and the Wilcoxon
    p-value is below ``alpha``; otherwise the pair splits 0.5/0.5. Pairs
    with fewer than 5 non-zero differences can never reach significance at
    conventional alphas and are treated as undecided.
    """
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    table.require_common_cases()
    if methods is None:
        methods = table.methods()
    wins = {m: 0.0 for m in methods}
    for i, ma in enumerate(methods):
        va = table.series(ma, metric)
        for mb in methods[i + 1:]:
            vb = table.series(mb, metric)
            d = va - vb
            nonzero = int(np.count_nonzero(d))
            decided = None
            if nonzero >= 5:
                res = wilcoxon_signed_rank(va, vb)
                med = float(np.median(d))
                if res.p_value < alpha and med != 0.0:
                    favours_a = (med < 0.0) != higher_is_better
                    decided = ma if favours_a else mb
            if decided is None:
                wins[ma] += 0.5
                wins[mb] += 0.5
            else:
                wins[decided] += 1.0
    return wins


def rank_score(wins: float, num_methods: int) -> float:
    """Map a win count onto [0.1, 1.0]."""
    if num_methods < 2:
        raise ValueError("rank scores need at least 2 methods")
    if not 0 <= wins <= num_methods - 1:
        raise ValueError(f"win count {wins} out of range for {num_methods} methods")
    return 0.1 + 0.9 * wins / (num_methods - 1)


def overall_rank(scores) -> float:
    """Geometric mean of per-metric rank scores."""
    vals = np.asarray(list(scores), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no scores to combine")
    if (vals <= 0).any():
        raise ValueError("rank scores must be positive")
    return float(np.exp(np.log(vals).mean()))


@dataclasses.dataclass(frozen=True)
class RankConfig:
    """Ranking parameters; ``metrics`` pairs column names with direction."""

    alpha: float = 0.05
    metrics: tuple[tuple[str, bool], ...] = _DEFAULT_METRICS
    tail: str = "worst"
    initial_method: str = "Initial"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.metrics:
            raise ValueError("at least one metric is required for ranking")
        object.__setattr__(
            self, "metrics", tuple((str(m), bool(h)) for m, h in self.metrics)
        )
        if self.tail not in ("worst", "best"):
            raise ValueError(f"tail must be 'worst' or 'best', got {self.tail!r}")

    @staticmethod
    def from_json(path) -> "RankConfig":
        with open(path, "r", encoding="ascii") as fh:
            raw = json.load(fh)
        if raw.pop("schema_version", None) != 1:
            raise ValueError(f"{path}: missing or unsupported schema_version")
        known = {"alpha", "metrics", "tail", "initial_method"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        if "metrics" in raw:
            raw["metrics"] = tuple(
                (m["name"], bool(m["higher_is_better"])) for m in raw["metrics"]
            )
        return RankConfig(**raw)

    def to_json(self, path) -> None:
        doc = {
            "schema_version": 1,
            "alpha": self.alpha,
            "metrics": [
                {"name": m, "higher_is_better": h} for m, h in self.metrics
            ],
            "tail": self.tail,
            "initial_method": self.initial_method,
        }
        with open(path, "w", encoding="ascii") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


@dataclasses.dataclass(frozen=True)
class LeaderboardEntry:
    method: str
    aggregates: dict[str, float]     # keyed by display column name
    metric_scores: dict[str, float]  # keyed by ranked metric name
    overall: float                   # NaN for the unranked initial row


@dataclasses.dataclass(frozen=True)
class Leaderboard:
    """Ranked methods plus an optional unranked initial row."""

    entries: tuple[LeaderboardEntry, ...]
    initial: LeaderboardEntry | None = None

    def to_csv_text(self) -> str:
        header = ["method"] + [h for _, h, _ in _DISPLAY] + ["Rank"]
        lines = [",".join(header)]

        def fmt(entry, rank_text):
            cells = [entry.method]
            for col, _, _ in _DISPLAY:
                val = entry.aggregates.get(col)
                cells.append("" if val is None or not np.isfinite(val) else f"{val:.4g}")
            cells.append(rank_text)
            return ",".join(cells)

        if self.initial is not None:
            lines.append(fmt(self.initial, ""))
        for e in self.entries:
            lines.append(fmt(e, f"{e.overall:.4g}"))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        def entry_dict(e):
            return {
                "method": e.method,
                "aggregates": e.aggregates,
                "metric_scores": e.metric_scores,
                "overall": e.overall,
            }

        return {
            "schema_version": 1,
            "initial": entry_dict(self.initial) if self.initial else None,
            "entries": [entry_dict(e) for e in self.entries],
        }


def _aggregates(table: MetricTable, method: str, tail: str) -> dict[str, float]:
    out = {}
    per_case_tre = table.series(method, "tre")
    out["tre"] = float(per_case_tre.mean())
    out["tre30"] = robustness_percentile(per_case_tre, 30,
                                         higher_is_better=False, tail=tail)
    out["dsc"] = float(table.series(method, "dsc").mean())
    hd = table.series(method, "hd95")
    hd = hd[np.isfinite(hd)]
    out["hd95"] = float(hd.mean()) if hd.size else float("nan")
    out["sdlogj"] = float(table.series(method, "sdlogj").mean())
    out["runtime"] = float(table.series(method, "runtime").mean())
    return out


def build_leaderboard(table: MetricTable, cfg: RankConfig | None = None) -> Leaderboard:
    """Aggregate, test, score and order every method in the table.

    The configured initial method (identity fields) is shown unranked and
    never participates in the pairwise tests. A table with a single ranked
    method scores 1.0 by convention.
    """
    cfg = cfg or RankConfig()
    table.require_common_cases()
    methods = [m for m in table.methods() if m != cfg.initial_method]
    if not methods:
        raise ValueError("no rankable methods in table")

    initial = None
    if cfg.initial_method in table.methods():
        initial = LeaderboardEntry(
            method=cfg.initial_method,
            aggregates=_aggregates(table, cfg.initial_method, cfg.tail),
            metric_scores={},
            overall=float("nan"),
        )

    scores: dict[str, dict[str, float]] = {m: {} for m in methods}
    if len(methods) == 1:
        for metric, _ in cfg.metrics:
            scores[methods[0]][metric] = 1.0
    else:
        for metric, higher in cfg.metrics:
            wins = pairwise_wins(table, metric, higher, cfg.alpha, methods=methods)
            for m in methods:
                scores[m][metric] = rank_score(wins[m], len(methods))

    entries = [
        LeaderboardEntry(
            method=m,
            aggregates=_aggregates(table, m, cfg.tail),
            metric_scores=scores[m],
            overall=overall_rank(scores[m].values()),
        )
        for m in methods
    ]
    entries.sort(key=lambda e: (-e.overall, e.method))
    return Leaderboard(tuple(entries), initial)
