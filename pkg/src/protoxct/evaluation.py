"""Thresholded metrics, ranking metrics, calibration and bootstrap intervals.

Scores are defect probabilities in [0, 1]; a record is predicted defective
when its score is ``>=`` the threshold. Ratios with a zero denominator are
returned as ``None`` ("undefined"), never silently as 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from .numerics import make_rng, sigmoid

__all__ = [
    "ScoredSet",
    "Confusion",
    "EvalReport",
    "METRICS",
    "confusion_and_metrics",
    "metrics_from_counts",
    "roc_auc",
    "pr_auc",
    "ece",
    "brier",
    "fit_temperature",
    "apply_temperature",
    "select_threshold",
    "bootstrap_ci",
    "evaluate",
    "write_scored",
    "read_scored",
    "write_report",
    "format_report",
]

METRICS = ("accuracy", "precision", "recall", "f1", "specificity")


@dataclass
class ScoredSet:
    ids: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    calibrated: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        n = self.ids.size
        if self.labels.size != n or self.scores.size != n:
            raise ValueError("ids, labels and scores must have equal length")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("scores must be finite and within [0, 1]")
        if np.unique(self.ids).size != n:
            raise ValueError("ids must be unique")

    def __len__(self) -> int:
        return self.ids.size

    @classmethod
    def from_arrays(cls, labels, scores, calibrated: bool = False) -> "ScoredSet":
        labels = np.asarray(labels)
        return cls(np.arange(labels.size), labels, scores, calibrated)


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(a, b):
    return None if b == 0 else a / b


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> dict[str, float | None]:
    n = tp + fp + tn + fn
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    f1 = None if prec is None or rec is None or prec + rec == 0 else 2 * prec * rec / (prec + rec)
    return {
        "accuracy": _ratio(tp + tn, n),
        "precision": prec,
        "recall": rec,
        "f1": f1,
        "specificity": _ratio(tn, tn + fp),
    }


def _counts(labels, pred):
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return Confusion(tp, fp, tn, fn)


def confusion_and_metrics(scored: ScoredSet, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    c = _counts(scored.labels, scored.scores >= t)
    return c, metrics_from_counts(c.tp, c.fp, c.tn, c.fn)


def _need_both(labels):
    if labels.min() == labels.max():
        raise ValueError("both classes must be present")


def roc_auc(scored: ScoredSet) -> float:
    """Mann-Whitney statistic with mid-ranks for ties."""
    y = scored.labels
    _need_both(y)
    ranks = stats.rankdata(scored.scores)
    n1 = int(y.sum())
    n0 = y.size - n1
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def pr_auc(scored: ScoredSet) -> float:
    """Step-wise area under the precision-recall curve (average precision).

    Thresholds run over the distinct scores from high to low; each recall
    increment is weighted by the precision reached at that threshold.
    """
    y = scored.labels
    _need_both(y)
    order = np.argsort(-scored.scores, kind="mergesort")
    s, yy = scored.scores[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(yy)[last]
    fp = (last + 1) - tp
    prec = tp / (tp + fp)
    rec = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, rec]) * prec))


def ece(scored: ScoredSet, bins: int = 15) -> float:
    """Expected calibration error over equal-width bins of the defect score."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    s, y = scored.scores, scored.labels
    idx = np.minimum((s * bins).astype(np.int64), bins - 1)
    total = 0.0
    for b in range(bins):
        m = idx == b
        if m.any():
            total += m.sum() / s.size * abs(y[m].mean() - s[m].mean())
    return float(total)


def brier(scored: ScoredSet) -> float:
    return float(np.mean((scored.scores - scored.labels) ** 2))


def _nll_beta(beta, z, y):
    # mean binary NLL of sigmoid(beta * z)
    m = beta * z
    return float(np.mean(np.logaddexp(0.0, m) - y * m))


def fit_temperature(logits, labels, bounds=(1e-2, 1e2), tol: float = 1e-8) -> float:
    """Temperature T minimizing the NLL of ``sigmoid(logit / T)``.

    Works on the inverse temperature, where the objective is convex: a
    bounded scalar search brackets the optimum, then Newton steps polish it
    until the NLL derivative w.r.t. T is below ``tol``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if y.min() == y.max():
        raise ValueError("temperature fit needs both classes")
    lo, hi = 1.0 / bounds[1], 1.0 / bounds[0]
    res = optimize.minimize_scalar(_nll_beta, bounds=(lo, hi), args=(z, y), method="bounded", options={"xatol": 1e-10})
    beta = float(res.x)
    for _ in range(50):
        p = sigmoid(beta * z)
        g = float(np.mean((p - y) * z))
        h = float(np.mean(p * (1 - p) * z * z))
        gT = g * -(beta**2)  # dNLL/dT = dNLL/dbeta * dbeta/dT
        if abs(gT) < tol or h <= 0:
            break
        beta = min(max(beta - g / h, lo), hi)
    return 1.0 / beta


def apply_temperature(logits, T: float) -> np.ndarray:
    return sigmoid(np.asarray(logits, dtype=np.float64) / T)


def _f1_at(labels, scores, thresholds):
    # vectorized F1 for predictions scores >= t
    order = np.sort(scores)
    pos = np.sort(scores[labels == 1])
    n_pred = scores.size - np.searchsorted(order, thresholds, side="left")
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = n_pred - tp
    fn = pos.size - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.r_[0.0, mids, 1.0])


def select_threshold(scored: ScoredSet) -> float:
    """F1-maximizing threshold among 0, 1 and midpoints of adjacent distinct scores.

    Ties go to the lowest threshold.
    """
    _need_both(scored.labels)
    cand = threshold_candidates(scored.scores)
    f1 = _f1_at(scored.labels, scored.scores, cand)
    return float(cand[int(np.argmax(f1))])


def _metric_arrays(tp, fp, tn, fn):
    with np.errstate(divide="ignore", invalid="ignore"):
        n = tp + fp + tn + fn
        prec = np.where(tp + fp > 0, tp / (tp + fp), np.nan)
        rec = np.where(tp + fn > 0, tp / (tp + fn), np.nan)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), np.nan)
        return {
            "accuracy": (tp + tn) / n,
            "precision": prec,
            "recall": rec,
            "f1": f1,
            "specificity": np.where(tn + fp > 0, tn / (tn + fp), np.nan),
        }


def bootstrap_ci(
    scored: ScoredSet,
    t: float,
    rng: np.random.Generator,
    metrics=METRICS,
    replicates: int = 2000,
    level: float = 0.95,
    chunk: int = 500,
):
    """Percentile bootstrap intervals of thresholded metrics.

    Returns ``{metric: (lo, hi, n_dropped)}``; replicates where a metric is
    undefined are dropped and counted.
    """
    if replicates < 100:
        raise ValueError("use at least 100 bootstrap replicates")
    y = scored.labels
    pred = scored.scores >= t
    cells = {
        "tp": (pred & (y == 1)).astype(np.int64),
        "fp": (pred & (y == 0)).astype(np.int64),
        "tn": (~pred & (y == 0)).astype(np.int64),
        "fn": (~pred & (y == 1)).astype(np.int64),
    }
    n = y.size
    acc = {m: [] for m in metrics}
    done = 0
    while done < replicates:
        b = min(chunk, replicates - done)
        idx = rng.integers(0, n, size=(b, n))
        counts = {k: v[idx].sum(axis=1) for k, v in cells.items()}
        vals = _metric_arrays(counts["tp"], counts["fp"], counts["tn"], counts["fn"])
        for m in metrics:
            acc[m].append(vals[m])
        done += b
    alpha = (1.0 - level) / 2
    out = {}
    for m in metrics:
        v = np.concatenate(acc[m])
        ok = v[~np.isnan(v)]
        dropped = int(v.size - ok.size)
        if ok.size == 0:
            out[m] = (None, None, dropped)
        else:
            lo, hi = np.percentile(ok, [100 * alpha, 100 * (1 - alpha)])
            out[m] = (float(lo), float(hi), dropped)
    return out


@dataclass
class EvalReport:
    threshold: float
    temperature: float
    confusion: dict
    metrics: dict
    roc_auc: float | None
    pr_auc: float | None
    ece: float
    brier: float
    ci: dict
    bootstrap_seed: int
    bootstrap_replicates: int
    ece_bins: int = 15
    n: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def evaluate(
    scored: ScoredSet,
    threshold: float,
    temperature: float = 1.0,
    seed: int = 0,
    replicates: int = 2000,
    bins: int = 15,
) -> EvalReport:
    """Full report for (already calibrated) test scores at a fixed threshold."""
    c, m = confusion_and_metrics(scored, threshold)
    both = scored.labels.min() != scored.labels.max()
    ci = bootstrap_ci(scored, threshold, make_rng(seed), replicates=replicates)
    return EvalReport(
        threshold=float(threshold),
        temperature=float(temperature),
        confusion={"tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn},
        metrics=m,
        roc_auc=roc_auc(scored) if both else None,
        pr_auc=pr_auc(scored) if both else None,
        ece=ece(scored, bins),
        brier=brier(scored),
        ci={k: {"lo": v[0], "hi": v[1], "dropped": v[2]} for k, v in ci.items()},
        bootstrap_seed=int(seed),
        bootstrap_replicates=int(replicates),
        ece_bins=int(bins),
        n=len(scored),
    )


def _fmt(v):
    return "undefined" if v is None else f"{v:.3f}"


def format_report(r: EvalReport) -> str:
    lines = [
        f"threshold      {r.threshold:.3f}",
        f"temperature    {r.temperature:.3f}",
    ]
    for m in METRICS:
        ci = r.ci.get(m, {})
        lines.append(f"{m:<14} {_fmt(r.metrics[m])} ({_fmt(ci.get('lo'))}-{_fmt(ci.get('hi'))})")
    lines += [
        f"roc_auc        {_fmt(r.roc_auc)}",
        f"pr_auc         {_fmt(r.pr_auc)}",
        f"ece            {_fmt(r.ece)}",
        f"brier          {_fmt(r.brier)}",
        "confusion      (TP, FP, TN, FN) = ({tp}, {fp}, {tn}, {fn})".format(**r.confusion),
    ]
    return "\n".join(lines) + "\n"


def write_report(r: EvalReport, json_path, text_path=None) -> None:
    with open(json_path, "w") as fh:
        fh.write(r.to_json())
    if text_path is not None:
        with open(text_path, "w") as fh:
            fh.write(format_report(r))


def write_scored(scored: ScoredSet, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "label", "score"])
        for i, y, s in zip(scored.ids, scored.labels, scored.scores):
            wr.writerow([int(i), int(y), repr(float(s))])


def read_scored(path) -> ScoredSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != ["id", "label", "score"]:
        raise ValueError(f"{path}: expected header id,label,score")
    return ScoredSet(
        [int(r["id"]) for r in rows],
        [int(r["label"]) for r in rows],
        [float(r["score"]) for r in rows],
    )
