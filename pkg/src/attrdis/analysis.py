"""Evaluation metrics and bias diagnostics.

Label-based mA, instance-based precision/recall/F1, a probe-based estimate
of I(y^k; f^s), and the two post-hoc treatments of mutually exclusive
attribute groups (a separate softmax head, or argmax rectification).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .datagen import format_float

DEFAULT_THRESHOLD = 0.5
MI_EPS = 1e-3


@dataclass
class AttributeRecord:
    tpr: float
    tnr: float
    accuracy: float
    positive_ratio: float
    flag: str = ""  # "no_positive" / "no_negative" when a rate defaulted to 1

    @property
    def balanced(self) -> float:
        return (self.tpr + self.tnr) / 2


@dataclass
class MetricsReport:
    mA: float
    per_attribute: list[AttributeRecord]
    precision: float
    recall: float
    f1: float
    threshold: float = DEFAULT_THRESHOLD
    flags: dict[str, int] = field(default_factory=dict)


def _binary(posteriors, threshold: float) -> np.ndarray:
    return np.asarray(posteriors, dtype=np.float64) > threshold


def mean_accuracy(posteriors, labels, threshold: float = DEFAULT_THRESHOLD):
    """mA and per-attribute records.

    A prediction is positive when the posterior exceeds ``threshold``.  An
    attribute without positives (negatives) gets tpr (tnr) = 1 and a flag.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    pred = _binary(posteriors, threshold)
    y = np.asarray(labels) == 1
    if pred.shape != y.shape or pred.ndim != 2 or len(y) < 1:
        raise ValueError(f"posteriors {pred.shape} and labels {y.shape} must be equal (n >= 1, C)")
    n = len(y)
    records = []
    for s in range(y.shape[1]):
        P = int(y[:, s].sum())
        N = n - P
        tp = int((pred[:, s] & y[:, s]).sum())
        tn = int((~pred[:, s] & ~y[:, s]).sum())
        flag = ""
        if P == 0:
            tpr, flag = 1.0, "no_positive"
        else:
            tpr = tp / P
        if N == 0:
            tnr, flag = 1.0, "no_negative"
        else:
            tnr = tn / N
        records.append(AttributeRecord(tpr, tnr, (tp + tn) / n, P / n, flag))
    mA = float(np.mean([r.balanced for r in records]))
    return mA, records


def instance_metrics(posteriors, labels, threshold: float = DEFAULT_THRESHOLD):
    """Sample-averaged precision and recall, and their harmonic mean.

    Conventions per sample: empty prediction and empty truth count as
    precision = recall = 1; an empty prediction against a nonempty truth
    has precision 0, and a nonempty prediction against an empty truth has
    recall 0.  Returns ``(precision, recall, f1, flags)``.
    """
    pred = _binary(posteriors, threshold)
    y = np.asarray(labels) == 1
    inter = (pred & y).sum(axis=1)
    npred = pred.sum(axis=1)
    ntrue = y.sum(axis=1)
    both_empty = (npred == 0) & (ntrue == 0)
    prec = np.where(npred > 0, inter / np.maximum(npred, 1), np.where(both_empty, 1.0, 0.0))
    rec = np.where(ntrue > 0, inter / np.maximum(ntrue, 1), np.where(both_empty, 1.0, 0.0))
    precision, recall = float(prec.mean()), float(rec.mean())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    flags = {"both_empty": int(both_empty.sum()),
             "empty_prediction": int(((npred == 0) & (ntrue > 0)).sum()),
             "empty_truth": int(((ntrue == 0) & (npred > 0)).sum())}
    return precision, recall, f1, flags


def metrics_report(posteriors, labels, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    mA, records = mean_accuracy(posteriors, labels, threshold)
    precision, recall, f1, flags = instance_metrics(posteriors, labels, threshold)
    flags["attribute_rate_defaults"] = sum(1 for r in records if r.flag)
    return MetricsReport(mA, records, precision, recall, f1, threshold, flags)


def group_accuracy(pred: np.ndarray, labels: np.ndarray, group) -> float:
    """Mean balanced accuracy over the attributes of ``group`` for 0/1 predictions."""
    mA, records = mean_accuracy(np.asarray(pred, dtype=np.float64)[:, list(group)],
                                np.asarray(labels)[:, list(group)])
    return mA


# -- mutual information probe ---------------------------------------------------

@dataclass
class MIEstimate:
    """I(y^k; f^s) estimates in nats, indexed ``[k, s]``."""
    mi: np.ndarray
    null_mi: np.ndarray
    probe_accuracy: np.ndarray
    bins: int
    degenerate: np.ndarray
    probe: str = "logistic regression on standardized f^s, 50/50 split, equal-count bins of held-out scores"

    def off_target_mean(self) -> float:
        C = self.mi.shape[0]
        return float(self.mi[~np.eye(C, dtype=bool)].mean()) if C > 1 else 0.0

    def on_target_mean(self) -> float:
        return float(np.diag(self.mi).mean())

    def null_mean(self) -> float:
        return float(self.null_mi.mean())


def entropy_nats(y: np.ndarray) -> float:
    p = float(np.mean(y))
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -(p * math.log(p) + (1 - p) * math.log(1 - p))


def binned_mi(scores: np.ndarray, y: np.ndarray, bins: int) -> float:
    """Plug-in H(y) - sum_b p(b) H(y | b) over equal-count bins of ``scores``.

    Tied scores share a bin (the bin of their lowest rank).
    """
    m = len(scores)
    srt = np.sort(scores, kind="stable")
    rank = np.searchsorted(srt, scores, side="left")
    b = (rank * bins) // m
    cond = 0.0
    for k in np.unique(b):
        sel = b == k
        cond += sel.mean() * entropy_nats(y[sel])
    return entropy_nats(y) - cond


def _fit_probes(Xtr: np.ndarray, Ytr: np.ndarray, steps: int, lr: float) -> tuple[np.ndarray, np.ndarray]:
    """Independent logistic regressions, one per target column, full-batch Adam."""
    K, m = Xtr.shape[1], Ytr.shape[1]
    params = {"w": np.zeros((K, m)), "b": np.zeros(m)}
    state = nc.AdamState(lr=lr)
    for _ in range(steps):
        w = nc.Tensor(params["w"], requires_grad=True)
        b = nc.Tensor(params["b"], requires_grad=True)
        with nc.Tape() as tape:
            p = nc.op_clamp(nc.op_sigmoid(nc.op_linear(Xtr, w, b)), nc.PROB_EPS, 1 - nc.PROB_EPS)
            loss = nc.op_bce(p, Ytr)
        tape.backward(loss)
        params, state = nc.adam_step(params, {"w": w.grad, "b": b.grad}, state)
    return params["w"], params["b"]


def mi_probe(features, targets, bins: int = 8, seed=0, steps: int = 200, lr: float = 0.1):
    """Probe-based I(y; f) for one feature block and one or more binary targets.

    ``features`` is (n, K); ``targets`` is (n,) or (n, m).  A linear
    logistic probe is fit on a random half, its held-out logits are cut into
    ``bins`` equal-count bins and the plug-in MI is computed on those bins.
    Returns arrays ``(mi, probe_accuracy, degenerate)`` of length m (scalars
    for 1-d targets).  Constant targets give MI 0 and ``degenerate=True``.
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    single = Y.ndim == 1
    Y = Y[:, None] if single else Y
    n = len(X)
    if n < 100:
        raise ValueError("mi_probe needs n >= 100")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    tr, ho = perm[: n // 2], perm[n // 2:]
    mu = X[tr].mean(axis=0)
    sd = X[tr].std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    w, b = _fit_probes(Z[tr], Y[tr], steps, lr)
    scores = Z[ho] @ w + b
    m = Y.shape[1]
    mi = np.zeros(m)
    acc = np.zeros(m)
    degenerate = np.zeros(m, dtype=bool)
    for j in range(m):
        yh = Y[ho, j]
        acc[j] = float(((scores[:, j] > 0) == (yh == 1)).mean())
        if Y[:, j].min() == Y[:, j].max():
            degenerate[j] = True
            continue
        mi[j] = binned_mi(scores[:, j], yh, bins)
    if single:
        return float(mi[0]), float(acc[0]), bool(degenerate[0])
    return mi, acc, degenerate


def mi_table(parts: np.ndarray, labels: np.ndarray, bins: int = 8, seed=0) -> MIEstimate:
    """Estimate I(y^k; f^s) for all (k, s) plus a permutation-null control.

    ``parts`` is (n, C, K).  The null shuffles the rows of the label matrix
    before probing, so every target keeps its marginal but loses any link
    to the features.
    """
    parts = np.asarray(parts)
    labels = np.asarray(labels, dtype=np.float64)
    n, C, _ = parts.shape
    rng = np.random.default_rng(seed)
    shuffled = labels[rng.permutation(n)]
    mi = np.zeros((C, C))
    null = np.zeros((C, C))
    acc = np.zeros((C, C))
    deg = np.zeros((C, C), dtype=bool)
    for s in range(C):
        mi[:, s], acc[:, s], deg[:, s] = mi_probe(parts[:, s, :], labels, bins, [seed, s])
        null[:, s], _, _ = mi_probe(parts[:, s, :], shuffled, bins, [seed, s])
    return MIEstimate(mi, null, acc, bins, deg)


# -- exclusive attribute groups ---------------------------------------------------

def robust_b_rectify(posteriors, group, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Threshold outside ``group``; inside it keep only the most confident attribute.

    Ties go to the lowest attribute index.
    """
    group = list(group)
    if not group:
        raise ValueError("group must be nonempty")
    P = np.asarray(posteriors, dtype=np.float64)
    if len(set(group)) != len(group) or min(group) < 0 or max(group) >= P.shape[1]:
        raise ValueError(f"group indices must be distinct and within [0, {P.shape[1]})")
    pred = (P > threshold).astype(np.uint8)
    winner = np.asarray(group)[np.argmax(P[:, group], axis=1)]
    pred[:, group] = 0
    pred[np.arange(len(P)), winner] = 1
    return pred


@dataclass
class RobustAHead:
    group: tuple[int, ...]
    w: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    class_weights: np.ndarray
    excluded: int

    def logits(self, f: np.ndarray) -> np.ndarray:
        return ((np.asarray(f) - self.mean) / self.scale) @ self.w + self.b

    def predict(self, f: np.ndarray) -> np.ndarray:
        """One-hot (n, len(group)) predictions."""
        idx = np.argmax(self.logits(f), axis=1)
        out = np.zeros((len(f), len(self.group)), dtype=np.uint8)
        out[np.arange(len(f)), idx] = 1
        return out

    def apply(self, f: np.ndarray, base_pred: np.ndarray) -> np.ndarray:
        """Replace the group columns of 0/1 predictions with the head's output."""
        pred = np.array(base_pred, dtype=np.uint8, copy=True)
        pred[:, list(self.group)] = self.predict(f)
        return pred


def inverse_frequency_weights(classes: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(classes, minlength=k).astype(np.float64)
    n = counts.sum()
    return np.where(counts > 0, n / (k * np.maximum(counts, 1)), 0.0)


def softmax_head_loss(Z, classes, w, b, class_weights=None):
    """Weighted softmax cross-entropy of a linear head (taped if a Tape is active)."""
    return nc.op_softmax_xent(nc.op_linear(Z, w, b), classes, class_weights)


def robust_a_head(f, labels, group, class_weights="inverse", seed=0,
                  steps: int = 300, lr: float = 0.05) -> RobustAHead:
    """Train a linear softmax head over frozen features for an exclusive group.

    Samples whose group labels are not exactly one-hot are dropped (and
    counted).  ``class_weights`` is ``"inverse"`` (inverse class frequency),
    ``None`` (unweighted) or an explicit array.
    """
    group = tuple(int(g) for g in group)
    f = np.asarray(f, dtype=np.float64)
    Y = np.asarray(labels)[:, list(group)]
    ok = Y.sum(axis=1) == 1
    excluded = int((~ok).sum())
    X, Y = f[ok], Y[ok]
    classes = np.argmax(Y, axis=1)
    k = len(group)
    if len(np.unique(classes)) < 2:
        raise ValueError("robust_a_head needs at least 2 classes present")
    if isinstance(class_weights, str):
        if class_weights != "inverse":
            raise ValueError(f"unknown class_weights {class_weights!r}")
        cw = inverse_frequency_weights(classes, k)
    elif class_weights is None:
        cw = np.ones(k)
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    rng = np.random.default_rng(seed)
    params = {"w": rng.normal(0.0, 0.01, (X.shape[1], k)), "b": np.zeros(k)}
    state = nc.AdamState(lr=lr)
    for _ in range(steps):
        w = nc.Tensor(params["w"], requires_grad=True)
        b = nc.Tensor(params["b"], requires_grad=True)
        with nc.Tape() as tape:
            loss = softmax_head_loss(Z, classes, w, b, cw)
        tape.backward(loss)
        params, state = nc.adam_step(params, {"w": w.grad, "b": b.grad}, state)
    return RobustAHead(group, params["w"], params["b"], mu, sd, cw, excluded)


# -- serialization ------------------------------------------------------------------

METRICS_HEADER = ["split", "threshold", "mA", "precision", "recall", "f1"]
PER_ATTRIBUTE_HEADER = ["split", "attribute", "tpr", "tnr", "accuracy", "positive_ratio", "flag"]
MI_HEADER = ["target", "feature", "mi_nats", "null_mi_nats", "probe_accuracy", "bins", "degenerate"]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def metrics_csv(reports: dict[str, MetricsReport]) -> str:
    rows = [[split, format_float(r.threshold), format_float(r.mA), format_float(r.precision),
             format_float(r.recall), format_float(r.f1)] for split, r in reports.items()]
    return _csv(METRICS_HEADER, rows)


def per_attribute_csv(reports: dict[str, MetricsReport]) -> str:
    rows = []
    for split, r in reports.items():
        for s, a in enumerate(r.per_attribute):
            rows.append([split, s, format_float(a.tpr), format_float(a.tnr), format_float(a.accuracy),
                         format_float(a.positive_ratio), a.flag])
    return _csv(PER_ATTRIBUTE_HEADER, rows)


def mi_csv(est: MIEstimate) -> str:
    C = est.mi.shape[0]
    rows = [[k, s, format_float(est.mi[k, s]), format_float(est.null_mi[k, s]),
             format_float(est.probe_accuracy[k, s]), est.bins, int(est.degenerate[k, s])]
            for k in range(C) for s in range(C)]
    return _csv(MI_HEADER, rows)


def matrix_csv(M: np.ndarray) -> str:
    C = M.shape[0]
    return _csv([""] + [str(j) for j in range(C)],
                [[i] + [format_float(v) for v in M[i]] for i in range(C)])


def report_text(report: MetricsReport) -> str:
    """Key-value rendering of a report."""
    lines = [f"threshold={format_float(report.threshold)}", f"mA={format_float(report.mA)}",
             f"precision={format_float(report.precision)}", f"recall={format_float(report.recall)}",
             f"f1={format_float(report.f1)}"]
    lines += [f"flag.{k}={v}" for k, v in sorted(report.flags.items())]
    for s, a in enumerate(report.per_attribute):
        lines.append(f"attr.{s}: tpr={format_float(a.tpr)} tnr={format_float(a.tnr)} "
                     f"accuracy={format_float(a.accuracy)} positive_ratio={format_float(a.positive_ratio)}"
                     + (f" flag={a.flag}" if a.flag else ""))
    return "\n".join(lines) + "\n"
