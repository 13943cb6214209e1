"""Metrics, handcrafted pair features, and the logistic-regression baseline.

AUC-ROC uses the rank statistic with midranks for ties; F1 is reported at a
fixed 0.5 threshold. The baseline mirrors classical manual feature
engineering on chromosome pairs: per-chromosome summary statistics plus
pairwise warping distance, correlation and covariance, fed to a
full-batch-gradient logistic regression.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import ChromosomePair
from .errors import DegenerateLength, EmptyInput, InvariantViolation, SingleClass
from .model import ModelConfig, ModelState, predict_bags


# ---------------------------------------------------------------------------
# ranking metrics

def auc_roc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvariantViolation(f"scores/labels shapes {scores.shape}/{labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[pos].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float = 0.5) -> tuple[int, int, int, int]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


def f1_from_confusion(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def f1(scores, labels, threshold: float = 0.5) -> float:
    tp, fp, _, fn = confusion(scores, labels, threshold)
    return f1_from_confusion(tp, fp, fn)


# ---------------------------------------------------------------------------
# dynamic time warping

def dtw_distance(x, y) -> float:
    """Classic full-table DTW with absolute-difference point cost.

    The quadratic DP runs along anti-diagonals with rolling buffers, so each
    step is a handful of contiguous vector ops; no window, no slope
    constraint. Cell (i, j) takes min over the up/left/diagonal neighbors.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise EmptyInput("DTW inputs must be non-empty")
    n, m = x.size, y.size
    cost = np.abs(x[:, None] - y[None, :])
    # prev2/prev hold diagonals k-2 and k-1, indexed by i (padded with inf at
    # both ends so the neighbor shifts never go out of bounds)
    inf = np.inf
    prev2 = np.full(n + 2, inf)
    prev = np.full(n + 2, inf)
    cur = np.full(n + 2, inf)
    prev[1] = cost[0, 0]  # diagonal k=0 is the single cell (0, 0)
    if n + m == 2:
        return float(prev[1])
    for k in range(1, n + m - 1):
        i0 = max(0, k - (m - 1))
        i1 = min(n - 1, k)
        sl = slice(i0 + 1, i1 + 2)  # padded positions for i in [i0, i1]
        up = prev[i0:i1 + 1]        # (i-1, j)   on diagonal k-1
        left = prev[sl]             # (i, j-1)   on diagonal k-1
        diag = prev2[i0:i1 + 1]     # (i-1, j-1) on diagonal k-2
        idx = np.arange(i0, i1 + 1)
        cur[:] = inf
        cur[sl] = cost[idx, k - idx]
        cur[sl] += np.minimum(np.minimum(up, left), diag)
        prev2, prev, cur = prev, cur, prev2
    return float(prev[n])


# ---------------------------------------------------------------------------
# handcrafted pair features

PEAK_BAND_SIGMA = 0.5  # extrema must clear mean +/- this many stds to count

FEATURE_NAMES = (
    "a_mean", "a_var", "a_on_peak", "a_off_peak",
    "b_mean", "b_var", "b_on_peak", "b_off_peak",
    "dtw_distance", "pearson_r", "covariance",
)


@dataclass(frozen=True)
class PairFeatures:
    a_mean: float
    a_var: float
    a_on_peak: int
    a_off_peak: int
    b_mean: float
    b_var: float
    b_on_peak: int
    b_off_peak: int
    dtw_distance: float
    pearson_r: float
    covariance: float

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)


def _channel_mean(pair_side) -> np.ndarray:
    return np.asarray(pair_side.values, dtype=np.float64)[:, :pair_side.valid_len].mean(axis=0)


def _peak_counts(seq: np.ndarray) -> tuple[int, int]:
    mean = seq.mean()
    std = seq.std()
    inner = seq[1:-1]
    maxima = (inner > seq[:-2]) & (inner > seq[2:]) & (inner > mean + PEAK_BAND_SIGMA * std)
    minima = (inner < seq[:-2]) & (inner < seq[2:]) & (inner < mean - PEAK_BAND_SIGMA * std)
    return int(maxima.sum()), int(minima.sum())


def pair_features(pair: ChromosomePair) -> PairFeatures:
    """Summary statistics of one homologous pair.

    Per-chromosome stats use the channel-averaged sequence over the valid
    region. Correlation and covariance are computed over the overlapping
    valid prefix; DTW warps the full valid regions (lengths may differ).
    Pearson is reported as 0 when either side has zero variance.
    """
    if pair.a.valid_len < 3 or pair.b.valid_len < 3:
        raise DegenerateLength(
            f"valid lengths {pair.a.valid_len}/{pair.b.valid_len} below 3")
    sa = _channel_mean(pair.a)
    sb = _channel_mean(pair.b)
    a_on, a_off = _peak_counts(sa)
    b_on, b_off = _peak_counts(sb)
    overlap = min(sa.size, sb.size)
    da = sa[:overlap] - sa[:overlap].mean()
    db = sb[:overlap] - sb[:overlap].mean()
    cov = float((da * db).mean())
    var_a = float((da * da).mean())
    var_b = float((db * db).mean())
    pearson = cov / np.sqrt(var_a * var_b) if var_a > 0.0 and var_b > 0.0 else 0.0
    return PairFeatures(
        a_mean=float(sa.mean()), a_var=float(sa.var()), a_on_peak=a_on, a_off_peak=a_off,
        b_mean=float(sb.mean()), b_var=float(sb.var()), b_on_peak=b_on, b_off_peak=b_off,
        dtw_distance=dtw_distance(sa, sb), pearson_r=float(pearson), covariance=cov,
    )


# ---------------------------------------------------------------------------
# reports

@dataclass(frozen=True)
class RecordScore:
    record_id: str
    score: float
    label: int


@dataclass(frozen=True)
class EvalReport:
    auc: float
    f1: float
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    records: tuple[RecordScore, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.tp + self.fp + self.tn + self.fn != len(self.records):
            raise InvariantViolation("confusion counts do not sum to record count")
        if abs(f1_from_confusion(self.tp, self.fp, self.fn) - self.f1) > 0.0:
            raise InvariantViolation("reported f1 inconsistent with confusion counts")

    def to_dict(self, include_records: bool = True) -> dict:
        out = {
            "auc": self.auc, "f1": self.f1, "threshold": self.threshold,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "n_records": len(self.records),
        }
        if include_records:
            out["records"] = [
                {"record_id": r.record_id, "score": r.score, "label": r.label}
                for r in self.records
            ]
        return out

    def to_json(self, include_records: bool = True) -> str:
        return json.dumps(self.to_dict(include_records), indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["record_id", "score", "label"])
            for r in self.records:
                writer.writerow([r.record_id, repr(r.score), r.label])


def evaluate_scores(record_ids, scores, labels, threshold: float = 0.5) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    tp, fp, tn, fn = confusion(scores, labels, threshold)
    return EvalReport(
        auc=auc_roc(scores, labels),
        f1=f1_from_confusion(tp, fp, fn),
        threshold=threshold,
        tp=tp, fp=fp, tn=tn, fn=fn,
        records=tuple(RecordScore(str(rid), float(s), int(l))
                      for rid, s, l in zip(record_ids, scores, labels)),
    )


def evaluate_model(records, state: ModelState, cfg: ModelConfig,
                   threshold: float = 0.5) -> EvalReport:
    preds = predict_bags(records, state, cfg)
    return evaluate_scores(
        [r.record_id for r in records],
        [p.y_hat for p in preds],
        [r.label for r in records],
        threshold,
    )


# ---------------------------------------------------------------------------
# logistic-regression baseline on handcrafted features

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _bag_feature_rows(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pair feature matrix plus bag index and bag labels."""
    rows = []
    bag_idx = []
    labels = []
    for i, rec in enumerate(records):
        labels.append(rec.label)
        for pair in rec.pairs:
            rows.append(pair_features(pair).vector())
            bag_idx.append(i)
    return np.array(rows), np.array(bag_idx), np.array(labels)


def lr_baseline(train_records, test_records, l2: float = 1e-3,
                epochs: int = 500, step: float = 0.1) -> EvalReport:
    """Feature-engineering baseline: logistic regression over pair features.

    Features are standardized with training statistics only; training is
    full-batch gradient descent on logistic loss with L2 on all parameters.
    A bag scores the mean of its per-pair probabilities.
    """
    x_train, idx_train, y_train_bags = _bag_feature_rows(train_records)
    x_test, idx_test, y_test_bags = _bag_feature_rows(test_records)
    if len(np.unique(y_train_bags)) < 2:
        raise SingleClass("training bags contain a single class")
    mu = x_train.mean(axis=0)
    sd = x_train.std(axis=0)
    sd[sd == 0.0] = 1.0
    x_train = np.column_stack([(x_train - mu) / sd, np.ones(len(x_train))])
    x_test = np.column_stack([(x_test - mu) / sd, np.ones(len(x_test))])
    y_pair = y_train_bags[idx_train].astype(np.float64)

    w = np.zeros(x_train.shape[1])
    n = len(x_train)
    for _ in range(epochs):
        p = _sigmoid(x_train @ w)
        grad = x_train.T @ (p - y_pair) / n + l2 * w
        w -= step * grad

    pair_scores = _sigmoid(x_test @ w)
    bag_scores = np.zeros(len(test_records))
    np.add.at(bag_scores, idx_test, pair_scores)
    bag_scores /= np.bincount(idx_test, minlength=len(test_records))
    return evaluate_scores([r.record_id for r in test_records], bag_scores, y_test_bags)


def lr_train_accuracy(train_records, l2: float = 0.0, epochs: int = 2000,
                      step: float = 0.5) -> float:
    """Training-set accuracy of the baseline (sanity probe for separable data)."""
    report = lr_baseline(train_records, train_records, l2=l2, epochs=epochs, step=step)
    correct = report.tp + report.tn
    return correct / len(report.records)
