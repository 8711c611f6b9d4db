"""Evaluation metrics and statistical comparison.

Dice for binary masks, area under the precision-recall curve via the
average-precision rule (no linear interpolation between PR points, which is
known to be biased), a Wilcoxon signed-rank test, and a cluster-compactness
score that stands in for scatter-plot inspection of style descriptors.

The Wilcoxon p-value is computed by exact enumeration of the sign-flip
distribution when the effective sample is small (n <= 12) and by the
normal approximation with tie and continuity corrections otherwise; the
approximation alone deviates from exact enumeration by more than 0.015 at
n = 6, so small samples default to the exact route.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, InvalidInputError
from .tensor import Tensor

WILCOXON_EXACT_LIMIT = 12


# -- dice --------------------------------------------------------------------


def dice(pred, gt, threshold: float = 0.5, empty_value: float = 1.0) -> float:
    """Dice overlap of a thresholded probability map against a binary mask.

    Both masks empty counts as ``empty_value`` (default 1.0: a correct empty
    prediction is rewarded; set 0.0 for the strict convention).
    """
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"dice shape mismatch: {p.shape} vs {g.shape}")
    if not np.isin(g, (0.0, 1.0)).all():
        raise InvalidInputError("ground-truth mask must be binary")
    pb = p >= threshold
    gb = g >= 0.5
    p_sum = int(pb.sum())
    g_sum = int(gb.sum())
    if p_sum == 0 and g_sum == 0:
        return float(empty_value)
    inter = int((pb & gb).sum())
    return 2.0 * inter / (p_sum + g_sum)


# -- precision/recall -----------------------------------------------------------


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def precision_recall_curve(scores: Sequence[float], labels: Sequence[int]) -> List[PRPoint]:
    """PR points at each distinct score along the descending sweep."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise DimensionError("scores and labels must be equal-length vectors")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("need at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted == 1)
    pp = np.arange(1, len(s) + 1)
    boundary = np.ones(len(s), dtype=bool)
    boundary[:-1] = s_sorted[:-1] != s_sorted[1:]
    points = [PRPoint(threshold=float(s_sorted[i]),
                      precision=float(tp[i] / pp[i]),
                      recall=float(tp[i] / n_pos))
              for i in np.flatnonzero(boundary)]
    return points


def aupr(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: sum of (recall step) x (precision at that step)."""
    points = precision_recall_curve(scores, labels)
    ap = 0.0
    prev_recall = 0.0
    for pt in points:
        ap += (pt.recall - prev_recall) * pt.precision
        prev_recall = pt.recall
    return ap


# -- Wilcoxon signed-rank ----------------------------------------------------------


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float],
                         mode: str = "auto") -> Tuple[float, float]:
    """Two-sided paired test; returns (W = min(W+, W-), p).

    Zero differences are dropped. If every difference is zero the result is
    the degenerate (0.0, 1.0). ``mode`` selects "exact" enumeration,
    "normal" approximation, or "auto" (exact for n <= 12).
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise DimensionError("wilcoxon needs two equal-length vectors")
    d = xa - ya
    d = d[d != 0.0]
    if d.size == 0:
        return 0.0, 1.0
    n = d.size
    if n < 6:
        raise InvalidInputError(
            f"need >= 6 nonzero differences for a meaningful test, got {n}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if mode == "auto":
        mode = "exact" if n <= WILCOXON_EXACT_LIMIT else "normal"
    if mode == "exact":
        p = _wilcoxon_exact_p(ranks, w)
    elif mode == "normal":
        p = _wilcoxon_normal_p(ranks, w)
    else:
        raise InvalidInputError(f"unknown wilcoxon mode {mode!r}")
    return w, float(min(1.0, p))


def _average_ranks(a: np.ndarray) -> np.ndarray:
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size, dtype=np.float64)
    sorted_a = a[order]
    i = 0
    next_rank = 1
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        avg = (2 * next_rank + (j - i)) / 2.0
        ranks[order[i:j + 1]] = avg
        next_rank += j - i + 1
        i = j + 1
    return ranks


def _wilcoxon_exact_p(ranks: np.ndarray, w: float) -> float:
    # ranks are multiples of 1/2; scale to integers and convolve the
    # sign-flip distribution of W+
    scaled = np.rint(ranks * 2).astype(np.int64)
    total = int(scaled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in scaled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    w_scaled = int(np.rint(w * 2))
    cdf_le = counts[:w_scaled + 1].sum() / counts.sum()
    return 2.0 * cdf_le


def _wilcoxon_normal_p(ranks: np.ndarray, w: float) -> float:
    mean = ranks.sum() / 2.0
    var = float((ranks ** 2).sum()) / 4.0  # tie correction is inherent
    if var == 0.0:
        return 1.0
    z = (w - mean + 0.5) / math.sqrt(var)  # continuity correction toward the center
    return math.erfc(-z / math.sqrt(2.0))


# -- cluster compactness ---------------------------------------------------------------


def cluster_compactness(points: Mapping[str, Sequence]) -> float:
    """Mean within-site variance over total variance of all style descriptors.

    Identical points everywhere return 0 by convention.
    """
    if len(points) < 2:
        raise InvalidInputError("need at least two sites")
    per_site = {}
    for site, pts in points.items():
        arr = np.asarray(pts, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise InvalidInputError(f"site {site!r} needs at least two descriptor vectors")
        per_site[site] = arr
    within = np.mean([arr.var(axis=0, ddof=0).sum() for arr in per_site.values()])
    pooled = np.concatenate(list(per_site.values()), axis=0)
    total = pooled.var(axis=0, ddof=0).sum()
    if total == 0.0:
        return 0.0
    return float(within / total)


# -- run reports ------------------------------------------------------------------------


@dataclass
class RunReport:
    """Per-round metrics plus final test results for one strategy run."""

    task: str
    strategy: str
    seed: int
    config_digest: str
    rounds: List[dict] = field(default_factory=list)
    final_test: Dict[str, Dict[str, float]] = field(default_factory=dict)
    per_image_test: Dict[str, List[float]] = field(default_factory=dict)
    best_round: int = -1
    compactness: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def add_round_record(self, round_idx: int, site: str, split: str,
                         metric: str, value: float) -> None:
        key = (round_idx, site, split, metric)
        if any((r["round"], r["site"], r["split"], r["metric"]) == key for r in self.rounds):
            raise InvalidInputError(f"duplicate round record {key}")
        if not np.isfinite(value):
            raise InvalidInputError(f"non-finite metric value for {key}")
        self.rounds.append({"round": round_idx, "site": site, "split": split,
                            "metric": metric, "value": float(value)})

    def round_values(self, metric: str, split: str) -> Dict[int, Dict[str, float]]:
        out: Dict[int, Dict[str, float]] = {}
        for r in self.rounds:
            if r["metric"] == metric and r["split"] == split:
                out.setdefault(r["round"], {})[r["site"]] = r["value"]
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @staticmethod
    def from_json(text: str) -> "RunReport":
        raw = json.loads(text)
        return RunReport(**raw)

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load_json(path) -> "RunReport":
        with open(path) as fh:
            return RunReport.from_json(fh.read())

    def to_csv(self) -> str:
        """One row per metric: strategy, seed, metric, then per-site columns."""
        sites = [s for s in self.final_test if s != "pooled"]
        metrics = sorted({m for v in self.final_test.values() for m in v})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["strategy", "seed", "metric"] + sites + ["pooled"])
        for metric in metrics:
            row = [self.strategy, self.seed, metric]
            for site in sites + ["pooled"]:
                row.append(self.final_test.get(site, {}).get(metric, ""))
            writer.writerow(row)
        return buf.getvalue()

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())
