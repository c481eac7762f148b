"""Classification metrics, ROC export and the paired bootstrap test."""
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, EmptyMatrix, LabelOutOfRange, LengthMismatch


def confusion(true_labels, pred_labels, k):
    """``k x k`` counts, rows = true class, columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    p = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    if t.size != p.size:
        raise LengthMismatch(f"{t.size} true labels vs {p.size} predictions")
    for name, v in (("true", t), ("predicted", p)):
        if v.size and (v.min() < 0 or v.max() >= k):
            raise LabelOutOfRange(f"{name} labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _check(cm):
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if cm.sum() <= 0:
        raise EmptyMatrix("confusion matrix holds no samples")
    return cm


def per_class(cm):
    """Per-class precision, recall and F1 (0 wherever a denominator is 0)."""
    cm = _check(cm)
    tp = np.diag(cm).astype(np.float64)
    pred = cm.sum(axis=0).astype(np.float64)
    true = cm.sum(axis=1).astype(np.float64)
    prec = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    rec = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    s = prec + rec
    f1 = np.divide(2 * prec * rec, s, out=np.zeros_like(tp), where=s > 0)
    return prec, rec, f1, true


def macro_metrics(cm):
    """``(accuracy, precision, recall, f1)`` with unweighted class means."""
    cm = _check(cm)
    prec, rec, f1, _ = per_class(cm)
    acc = float(np.trace(cm)) / float(cm.sum())
    return acc, float(prec.mean()), float(rec.mean()), float(f1.mean())


def weighted_metrics(cm):
    """Support-weighted precision, recall and F1."""
    prec, rec, f1, support = per_class(cm)
    w = support / support.sum()
    return float(prec @ w), float(rec @ w), float(f1 @ w)


def cohen_kappa(cm):
    cm = _check(cm)
    n = float(cm.sum())
    po = np.trace(cm) / n
    pe = float(np.sum(cm.sum(axis=1).astype(np.float64) * cm.sum(axis=0))) / (n * n)
    if pe == 1.0:
        return 0.0
    return float((po - pe) / (1.0 - pe))


def binary_auc(scores, positive):
    """Mann-Whitney AUC with ties counted as one half (rank-sum form)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc_ovr(scores, true_labels, return_skipped=False):
    """Mean one-vs-rest AUC over classes that have both positives and negatives."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise LengthMismatch(f"scores {scores.shape} vs {y.size} labels")
    aucs, skipped = {}, []
    for c in range(scores.shape[1]):
        pos = y == c
        if pos.all() or not pos.any():
            skipped.append(c)
            continue
        aucs[c] = binary_auc(scores[:, c], pos)
    if not aucs:
        raise DegenerateLabels("no class has both positive and negative samples")
    value = float(np.mean(list(aucs.values())))
    return (value, aucs, skipped) if return_skipped else value


def roc_points(scores, positive):
    """``(fpr, tpr, threshold)`` rows, thresholds descending."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    rows = [(0.0, 0.0, math.inf)]
    for thr in np.unique(scores)[::-1]:
        hit = scores >= thr
        tp = int(np.sum(hit & positive))
        fp = int(np.sum(hit & ~positive))
        rows.append((fp / n_neg if n_neg else 0.0, tp / n_pos if n_pos else 0.0, float(thr)))
    return rows


def roc_csv(scores, true_labels):
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    buf = io.StringIO()
    buf.write("class,fpr,tpr,threshold\n")
    for c in range(scores.shape[1]):
        for fpr, tpr, thr in roc_points(scores[:, c], y == c):
            buf.write(f"{c},{fpr:.6f},{tpr:.6f},{thr:.6g}\n")
    return buf.getvalue()


def paired_bootstrap(pred_a, pred_b, true_labels, iterations=5000, seed=0):
    """One-sided p-value for "A is more accurate than B".

    Each iteration resamples sample indices with replacement; p is the share of
    resamples where accuracy(A) <= accuracy(B).
    """
    a = np.asarray(pred_a).reshape(-1)
    b = np.asarray(pred_b).reshape(-1)
    y = np.asarray(true_labels).reshape(-1)
    if not a.size == b.size == y.size:
        raise LengthMismatch(f"lengths differ: {a.size}, {b.size}, {y.size}")
    if iterations < 1 or a.size == 0:
        raise ValueError("need iterations >= 1 and at least one sample")
    diff = (a == y).astype(np.int64) - (b == y).astype(np.int64)
    rng = np.random.default_rng(seed)
    worse = 0
    chunk = max(1, 2_000_000 // a.size)
    for lo in range(0, iterations, chunk):
        m = min(chunk, iterations - lo)
        idx = rng.integers(0, a.size, size=(m, a.size))
        worse += int(np.count_nonzero(diff[idx].sum(axis=1) <= 0))
    return worse / iterations


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    kappa: float
    auc: float
    n: int
    weighted: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    confusion: list = field(default_factory=list)
    auc_skipped: list = field(default_factory=list)

    HEADLINE = ("accuracy", "precision", "recall", "f1", "kappa", "auc")

    def to_dict(self):
        return asdict(self)


def evaluate_predictions(true_labels, scores, k=None):
    """Full report from per-sample class scores (argmax is the prediction)."""
    scores = np.asarray(scores, dtype=np.float64)
    k = k or scores.shape[1]
    pred = np.argmax(scores, axis=1)
    cm = confusion(true_labels, pred, k)
    acc, p, r, f1 = macro_metrics(cm)
    pc, rc, fc, support = per_class(cm)
    wp, wr, wf = weighted_metrics(cm)
    try:
        auc, _, skipped = macro_auc_ovr(scores, true_labels, return_skipped=True)
    except DegenerateLabels:
        auc, skipped = float("nan"), list(range(k))
    return MetricsReport(
        acc, p, r, f1, cohen_kappa(cm), auc, int(cm.sum()),
        weighted={"precision": wp, "recall": wr, "f1": wf},
        per_class={str(c): {"precision": float(pc[c]), "recall": float(rc[c]),
                            "f1": float(fc[c]), "support": int(support[c])} for c in range(k)},
        confusion=cm.tolist(), auc_skipped=skipped)


def aggregate(reports):
    """Mean and population std of each headline metric across folds."""
    out = {}
    for key in MetricsReport.HEADLINE:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def format_table(rows):
    """Aligned text table. ``rows`` maps a row label to a report or an aggregate dict."""
    cols = MetricsReport.HEADLINE
    label_w = max([len(str(k)) for k in rows] + [5])
    head = f"{'model':<{label_w}}" + "".join(f"  {c:>17}" for c in cols)
    lines = [head, "-" * len(head)]
    for label, r in rows.items():
        cells = []
        for c in cols:
            if isinstance(r, MetricsReport):
                cells.append(f"{getattr(r, c):.4f}")
            else:
                cells.append(f"{r[c]['mean']:.4f} ± {r[c]['std']:.4f}")
        lines.append(f"{label:<{label_w}}" + "".join(f"  {v:>17}" for v in cells))
    return "\n".join(lines) + "\n"


def report_json(obj, **extra):
    d = obj.to_dict() if hasattr(obj, "to_dict") else dict(obj)
    d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True, default=float)
