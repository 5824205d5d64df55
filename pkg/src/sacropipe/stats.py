"""Evaluation statistics: ROC/AUC, cut-offs, confusion metrics, bootstrap CIs,
paired tests (DeLong, McNemar) and the follow-up progression ratios."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from .errors import CIFailure, DegenerateVarianceError, DomainError
from .manifest import FollowUpManifest

log = logging.getLogger(__name__)

CONFIDENT_THRESHOLD = 0.7
CONFIDENT_LOW = 0.3
Z_95 = 1.96


@dataclass
class ScoredSet:
    sample_ids: list[str]
    probabilities: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.sample_ids) == len(self.probabilities) == len(self.labels)):
            raise DomainError("sample_ids, probabilities and labels must have equal length")
        if ((self.probabilities < 0) | (self.probabilities > 1)).any():
            raise DomainError("probabilities must lie in [0, 1]")
        if not np.isin(self.labels, (0, 1)).all():
            raise DomainError("labels must be 0/1")


def _check_binary(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise DomainError("labels and scores must be 1-D arrays of equal length")
    if not np.isin(labels, (0, 1)).all():
        raise DomainError("labels must be 0/1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise DomainError("both classes must be present")
    return labels, scores


# ---------------------------------------------------------------------------
# ROC / AUC


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with midranks (ties earn half credit)."""
    labels, scores = _check_binary(labels, scores)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    ranks = sps.rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(labels, scores):
    """ROC points at every distinct score, from (0, 0) to (1, 1).

    Returns ``(fpr, tpr, thresholds)``; point i predicts positive for
    ``score >= thresholds[i]`` (the first threshold is +inf).
    """
    labels, scores = _check_binary(labels, scores)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.r_[distinct, s.size - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / y.sum()]
    fpr = np.r_[0.0, fps / (~y).sum()]
    thresholds = np.r_[np.inf, s[ends]]
    return fpr, tpr, thresholds


def trapezoid_area(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


# ---------------------------------------------------------------------------
# confusion metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(a, b):
    return a / b if b else None


def confusion(labels, scores, cutoff: float) -> ConfusionMatrix:
    """Predicted positive iff ``score > cutoff``."""
    if not 0 <= cutoff <= 1:
        raise DomainError("cutoff must lie in [0, 1]")
    labels = np.asarray(labels).astype(bool)
    pred = np.asarray(scores, dtype=np.float64) > cutoff
    return ConfusionMatrix(tp=int((pred & labels).sum()), fp=int((pred & ~labels).sum()),
                           tn=int((~pred & ~labels).sum()), fn=int((~pred & labels).sum()))


def matthews(cm: ConfusionMatrix) -> float | None:
    denom = (cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    if denom == 0:
        return None
    return (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(denom)


def basic_metrics(cm: ConfusionMatrix) -> dict:
    """Accuracy, sensitivity, specificity, balanced accuracy, MCC.

    Rates with a zero denominator are reported as ``None``.
    """
    sens = _ratio(cm.tp, cm.tp + cm.fn)
    spec = _ratio(cm.tn, cm.tn + cm.fp)
    bal = None if sens is None or spec is None else (sens + spec) / 2
    return {
        "accuracy": _ratio(cm.tp + cm.tn, cm.n),
        "sensitivity": sens,
        "specificity": spec,
        "balanced_accuracy": bal,
        "mcc": matthews(cm),
    }


def accuracy_at(labels, scores, cutoff) -> float:
    labels = np.asarray(labels).astype(bool)
    return float(((np.asarray(scores) > cutoff) == labels).mean())


def cutoff_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.r_[0.0, mids, 1.0])


def optimal_cutoff(labels, scores, objective: str = "accuracy") -> float:
    """Cut-off maximizing ``objective`` over midpoints between distinct scores and {0, 1}.

    Ties resolve to the smallest cut-off.
    """
    labels, scores = _check_binary(labels, scores)
    cands = cutoff_candidates(scores)
    # counts of positives/negatives strictly above each candidate
    order = np.sort(scores)
    pos_sorted = np.sort(scores[labels])
    neg_sorted = np.sort(scores[~labels])
    tp = pos_sorted.size - np.searchsorted(pos_sorted, cands, side="right")
    fp = neg_sorted.size - np.searchsorted(neg_sorted, cands, side="right")
    fn = pos_sorted.size - tp
    tn = neg_sorted.size - fp
    if objective == "accuracy":
        value = (tp + tn) / order.size
    elif objective == "balanced_accuracy":
        value = (tp / pos_sorted.size + tn / neg_sorted.size) / 2
    else:
        raise DomainError(f"unknown cut-off objective {objective!r}")
    return float(cands[int(np.argmax(value))])


# ---------------------------------------------------------------------------
# predictions


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    probability: float
    cutoff: float

    @property
    def predicted(self) -> int:
        return int(self.probability > self.cutoff)

    @property
    def confident(self) -> bool:
        return self.probability > CONFIDENT_THRESHOLD or self.probability < CONFIDENT_LOW

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "probability": self.probability,
                "cutoff": self.cutoff, "predicted": self.predicted, "confident": self.confident}


def make_predictions(sample_ids, probabilities, cutoff: float) -> list[PredictionRecord]:
    return [PredictionRecord(str(i), float(p), float(cutoff))
            for i, p in zip(sample_ids, probabilities)]


# ---------------------------------------------------------------------------
# bootstrap


def bootstrap_ci(metric: Callable, labels, scores, n_boot: int = 1000, seed: int = 0,
                 level: float = 0.95, max_undefined_fraction: float = 0.5):
    """Percentile bootstrap interval of ``metric(labels, scores)``.

    Resamples on which the metric is undefined (raises DomainError or returns
    None, e.g. single-class draws) are redrawn. Inputs are put in a canonical
    order first, so the result does not depend on the order of the entries.
    Returns ``(lo, hi, n_redrawn)``.
    """
    if n_boot < 1:
        raise DomainError("n_boot must be >= 1")
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((scores, labels))
    labels, scores = labels[order], scores[order]
    rng = np.random.default_rng(seed)
    n = labels.size
    values = []
    undefined = 0
    max_attempts = int(math.ceil(n_boot / (1 - max_undefined_fraction))) + 1
    attempts = 0
    while len(values) < n_boot:
        attempts += 1
        if attempts > max_attempts:
            raise CIFailure(f"metric undefined on {undefined} of {attempts - 1} resamples")
        idx = rng.integers(0, n, n)
        try:
            v = metric(labels[idx], scores[idx])
        except DomainError:
            v = None
        if v is None or (isinstance(v, float) and math.isnan(v)):
            undefined += 1
            continue
        values.append(float(v))
    if undefined:
        log.info("bootstrap: redrew %d undefined resamples", undefined)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(values, [tail, 100 - tail], method="linear")
    return float(lo), float(hi), undefined


def metric_at_cutoff(name: str, cutoff: float) -> Callable:
    def fn(labels, scores):
        return basic_metrics(confusion(labels, scores, cutoff))[name]
    fn.__name__ = f"{name}@{cutoff}"
    return fn


# ---------------------------------------------------------------------------
# DeLong


def _midrank(x: np.ndarray) -> np.ndarray:
    return sps.rankdata(x, method="average")


def delong_components(labels, scores):
    """Structural components of the AUC: (auc, V10 over positives, V01 over negatives)."""
    labels, scores = _check_binary(labels, scores)
    pos, neg = scores[labels], scores[~labels]
    m, n = pos.size, neg.size
    tz = _midrank(np.r_[pos, neg])
    tx, ty = _midrank(pos), _midrank(neg)
    a = (tz[:m].sum() - m * (m + 1) / 2) / (m * n)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    return float(a), v10, v01


@dataclass(frozen=True)
class DeLongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    variance: float


def delong_test(labels, scores_a, scores_b) -> DeLongResult:
    """Paired DeLong test of AUC(a) == AUC(b) on the same samples (two-sided)."""
    auc_a, v10a, v01a = delong_components(labels, scores_a)
    auc_b, v10b, v01b = delong_components(labels, scores_b)
    m, n = v10a.size, v01a.size
    s10 = np.cov(np.vstack([v10a, v10b])) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(np.vstack([v01a, v01b])) if n > 1 else np.zeros((2, 2))
    var = ((s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / m
           + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / n)
    var = max(float(var), 0.0)
    diff = auc_a - auc_b
    if var <= 1e-300:
        if abs(diff) > 1e-15:
            raise DegenerateVarianceError(f"AUC difference {diff} with zero variance")
        return DeLongResult(auc_a, auc_b, 0.0, 1.0, 0.0)
    z = diff / math.sqrt(var)
    p = float(min(1.0, 2 * sps.norm.sf(abs(z))))
    return DeLongResult(auc_a, auc_b, float(z), p, var)


# ---------------------------------------------------------------------------
# McNemar


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    statistic: float
    p: float
    method: str


EXACT_BELOW = 25


def mcnemar(preds_a, preds_b, labels) -> McNemarResult:
    """Paired comparison of two classifiers' correctness.

    ``b``: A right and B wrong; ``c``: A wrong and B right. Exact two-sided
    binomial when ``b + c < 25``, else continuity-corrected chi-square (1 df).
    """
    preds_a, preds_b, labels = (np.asarray(v).astype(int) for v in (preds_a, preds_b, labels))
    if not (preds_a.shape == preds_b.shape == labels.shape):
        raise DomainError("paired predictions must cover identical samples")
    ok_a, ok_b = preds_a == labels, preds_b == labels
    b = int((ok_a & ~ok_b).sum())
    c = int((~ok_a & ok_b).sum())
    nd = b + c
    if nd == 0:
        return McNemarResult(b, c, 0.0, 1.0, "degenerate")
    if nd < EXACT_BELOW:
        p = min(1.0, 2 * sps.binom.cdf(min(b, c), nd, 0.5))
        return McNemarResult(b, c, float(min(b, c)), float(p), "exact")
    stat = (abs(b - c) - 1) ** 2 / nd
    return McNemarResult(b, c, float(stat), float(sps.chi2.sf(stat, 1)), "chi2-cc")


# ---------------------------------------------------------------------------
# follow-up progression


@dataclass
class ProgressionResult:
    status: str
    group_size: int
    group_progressors: int
    population: int
    progressors: int
    risk_ratio: float | None = None
    rr_ci: tuple[float, float] | None = None
    odds_ratio: float | None = None
    or_ci: tuple[float, float] | None = None
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def katz_ci(a: int, n1: int, c: int, n2: int, z: float = Z_95):
    """Log-method interval for (a/n1) / (c/n2)."""
    if min(a, c) == 0:
        return None
    rr = (a / n1) / (c / n2)
    se = math.sqrt(1 / a - 1 / n1 + 1 / c - 1 / n2)
    return (rr * math.exp(-z * se), rr * math.exp(z * se))


def woolf_ci(a: int, b: int, c: int, d: int, z: float = Z_95):
    """Log-method interval for the cross-product ratio a*d / (b*c)."""
    if min(a, b, c, d) == 0:
        return None
    or_ = a * d / (b * c)
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    return (or_ * math.exp(-z * se), or_ * math.exp(z * se))


def progression_counts(group_size, group_progressors, population, progressors) -> ProgressionResult:
    """Ratios from the four counts of the confident-false-positive analysis.

    ``risk_ratio`` = progression rate among confident false positives divided by
    the progression rate among all baseline negatives (the group is part of that
    population). ``odds_ratio`` is the classical 2x2 cross-product of
    {confident FP, rest} x {progressed, not progressed}.
    """
    res = ProgressionResult("ok", group_size, group_progressors, population, progressors)
    if group_size == 0:
        res.status = "empty-confident-group"
        res.notes.append("no baseline-negative patient was scored above the confidence threshold")
        return res
    if progressors == 0:
        res.status = "no-progressors"
        res.notes.append("no baseline-negative patient progressed; ratios undefined")
        return res
    res.risk_ratio = (group_progressors / group_size) / (progressors / population)
    res.rr_ci = katz_ci(group_progressors, group_size, progressors, population)
    a = group_progressors
    b = group_size - group_progressors
    c = progressors - group_progressors
    d = (population - group_size) - c
    if b * c > 0:
        res.odds_ratio = a * d / (b * c)
    res.or_ci = woolf_ci(a, b, c, d)
    return res


def progression_ratios(baseline: Sequence[PredictionRecord], followup: FollowUpManifest,
                       conf_threshold: float = CONFIDENT_THRESHOLD) -> ProgressionResult:
    """Progression risk of baseline-negative patients the model called confidently positive."""
    fu = followup.by_id()
    group = prog_group = prog_total = 0
    for rec in baseline:
        if rec.sample_id not in fu:
            raise DomainError(f"no follow-up label for {rec.sample_id}")
        e = fu[rec.sample_id]
        if e.baseline_label != 0:
            raise DomainError(f"{rec.sample_id} is not baseline-negative")
        progressed = e.followup_label == 1
        prog_total += progressed
        if rec.probability > conf_threshold:
            group += 1
            prog_group += progressed
    return progression_counts(group, prog_group, len(baseline), prog_total)


# ---------------------------------------------------------------------------
# reports


def _ci_entry(point, ci):
    return {"value": point, "ci": None if ci is None else [ci[0], ci[1]]}


def probability_summary(labels, scores, bins: int = 10) -> dict:
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    edges = np.linspace(0, 1, bins + 1)
    out = {"bin_edges": edges.tolist()}
    for name, sel in (("negative", ~labels), ("positive", labels)):
        s = scores[sel]
        out[name] = {
            "n": int(s.size),
            "mean": float(s.mean()) if s.size else None,
            "confident_fraction": float(((s > CONFIDENT_THRESHOLD) | (s < CONFIDENT_LOW)).mean())
            if s.size else None,
            "histogram": np.histogram(s, bins=edges)[0].tolist(),
        }
    return out


@dataclass
class EvalReport:
    dataset: str
    cutoff: float
    n: int
    auc: dict
    balanced_accuracy: dict
    sensitivity: dict
    specificity: dict
    accuracy: float | None
    mcc: float | None
    confusion: dict
    roc: dict
    probabilities: dict
    bootstrap: dict

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_scores(labels, scores, cutoff: float, dataset: str = "dataset",
                    n_boot: int = 1000, seed: int = 0) -> EvalReport:
    """All per-dataset metrics with percentile bootstrap CIs."""
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    cm = confusion(labels, scores, cutoff)
    m = basic_metrics(cm)
    point_auc = auc(labels, scores)
    fpr, tpr, thr = roc_curve(labels, scores)

    def ci(metric):
        lo, hi, _ = bootstrap_ci(metric, labels, scores, n_boot=n_boot, seed=seed)
        return lo, hi

    return EvalReport(
        dataset=dataset, cutoff=float(cutoff), n=int(labels.size),
        auc=_ci_entry(point_auc, ci(auc)),
        balanced_accuracy=_ci_entry(m["balanced_accuracy"], ci(metric_at_cutoff("balanced_accuracy", cutoff))),
        sensitivity=_ci_entry(m["sensitivity"], ci(metric_at_cutoff("sensitivity", cutoff))),
        specificity=_ci_entry(m["specificity"], ci(metric_at_cutoff("specificity", cutoff))),
        accuracy=m["accuracy"], mcc=m["mcc"],
        confusion=asdict(cm),
        roc={"fpr": fpr.tolist(), "tpr": tpr.tolist(),
             "thresholds": [None if not np.isfinite(t) else float(t) for t in thr]},
        probabilities=probability_summary(labels, scores),
        bootstrap={"n_boot": n_boot, "seed": seed, "method": "percentile", "level": 0.95},
    )


def compare_models(labels, scores_a, scores_b, cutoff_a: float, cutoff_b: float) -> dict:
    """DeLong on the probabilities and McNemar on the thresholded predictions."""
    d = delong_test(labels, scores_a, scores_b)
    pa = (np.asarray(scores_a) > cutoff_a).astype(int)
    pb = (np.asarray(scores_b) > cutoff_b).astype(int)
    mc = mcnemar(pa, pb, labels)
    return {"delong": asdict(d), "mcnemar": asdict(mc)}
