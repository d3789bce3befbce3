"""Classification metrics, precision-recall curves and the label-fraction ablation.

Related is the positive class throughout. Metric functions are pure; the
ablation harness trains one classifier per (fraction, seed) row on a fixed
test split and can spread rows over worker processes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import CleanTweet, DatasetSplit, Label, subsample_labels
from .errors import DataError
from .lm import Checkpoint
from .transfer import (CLASSIFIER_PLAN, FineTunePlan, build_classifier, evaluate_loss,
                       predict_proba, train_classifier)


def _as_label(x) -> Label:
    if isinstance(x, Label):
        return x
    if isinstance(x, CleanTweet):
        return x.label
    return Label.parse(x)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(predictions: Sequence, truths: Sequence) -> ConfusionMatrix:
    if len(predictions) != len(truths):
        raise DataError(f"{len(predictions)} predictions for {len(truths)} truths")
    if not truths:
        raise DataError("cannot build a confusion matrix from zero examples")
    tp = fp = fn = tn = 0
    for p, t in zip(predictions, truths):
        p_pos = _as_label(p) is Label.RELATED
        t_pos = _as_label(t) is Label.RELATED
        if p_pos and t_pos:
            tp += 1
        elif p_pos:
            fp += 1
        elif t_pos:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def _class_metrics(tp: int, fp: int, fn: int) -> ClassMetrics:
    p, dp = _ratio(tp, tp + fp)
    r, dr = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return ClassMetrics(p, r, f1, tp + fn, dp or dr)


@dataclass(frozen=True)
class Metrics:
    related: ClassMetrics
    unrelated: ClassMetrics
    accuracy: float
    macro_f1: float

    def per_class(self) -> dict:
        return {Label.RELATED.value: self.related, Label.UNRELATED.value: self.unrelated}


def precision_recall_f1(cm: ConfusionMatrix) -> Metrics:
    """Per-class precision/recall/F1 and accuracy.

    A zero denominator gives 0 and sets ``degenerate`` on that class.
    """
    if cm.total <= 0:
        raise DataError("confusion matrix is empty")
    rel = _class_metrics(cm.tp, cm.fp, cm.fn)
    unr = _class_metrics(cm.tn, cm.fn, cm.fp)
    return Metrics(rel, unr, (cm.tp + cm.tn) / cm.total, (rel.f1 + unr.f1) / 2)


@dataclass
class MetricsReport:
    metrics: Metrics
    confusion: ConfusionMatrix
    train_loss: Optional[float] = None
    test_loss: Optional[float] = None
    seconds: Optional[float] = None

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "accuracy": self.metrics.accuracy,
            "macro_f1": self.metrics.macro_f1,
            "per_class": {k: asdict(v) for k, v in self.metrics.per_class().items()},
            "confusion": asdict(self.confusion),
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
        }
        if include_timing:
            d["seconds"] = self.seconds
        return d


@dataclass(frozen=True)
class PRCurve:
    points: tuple  # (recall, precision) pairs, recall non-decreasing
    average_precision: float
    thresholds: tuple = ()


def pr_curve(scores: Sequence[float], truths: Sequence) -> PRCurve:
    """Threshold sweep at every distinct score, highest first.

    Tied scores share one threshold. AP is the step sum of precision times
    the recall gained at each threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(truths),):
        raise DataError(f"{scores.size} scores for {len(truths)} truths")
    pos = np.array([_as_label(t) is Label.RELATED for t in truths], dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DataError("precision-recall curve needs at least one Related truth")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], pos[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    tp = np.cumsum(y)[ends]
    k = ends + 1
    recall = tp / n_pos
    precision = tp / k
    gains = np.diff(np.concatenate([[0.0], recall]))
    ap = float(np.sum(precision * gains))
    points = ((0.0, 1.0),) + tuple(zip(recall.tolist(), precision.tolist()))
    return PRCurve(points, ap, tuple(s[ends].tolist()))


def write_pr_csv(curve: PRCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in curve.points:
            w.writerow([repr(float(r)), repr(float(p))])


def evaluate(model, test: Sequence[CleanTweet], train: Optional[Sequence[CleanTweet]] = None,
             threshold: float = 0.5) -> tuple[MetricsReport, PRCurve]:
    """Score ``model`` on ``test``: metrics, losses and the PR curve."""
    if not test:
        raise DataError("empty evaluation set")
    probs = predict_proba(model, test)
    preds = [Label.RELATED if p > threshold else Label.UNRELATED for p in probs]
    cm = confusion(preds, test)
    report = MetricsReport(precision_recall_f1(cm), cm,
                           evaluate_loss(model, train) if train else None,
                           evaluate_loss(model, test))
    return report, pr_curve(probs, test)


# --- ablation -----------------------------------------------------------------

ABLATION_COLUMNS = ["fraction", "seed", "class", "precision", "recall", "f1", "accuracy", "seconds"]
DEFAULT_FRACTIONS = (5, 10, 20, 50, 80)


def split_hash(records: Sequence[CleanTweet]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps([r.id, list(r.tokens), r.label.value]).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class AblationRow:
    fraction: float
    seed: int
    n_labeled: int
    report: MetricsReport


@dataclass
class AblationTable:
    rows: list = field(default_factory=list)
    test_hash: str = ""
    error: Optional[str] = None

    def accuracy(self, fraction: float) -> float:
        """Mean accuracy over seeds at one fraction."""
        accs = [r.report.metrics.accuracy for r in self.rows if r.fraction == fraction]
        if not accs:
            raise KeyError(fraction)
        return float(np.mean(accs))

    def csv_rows(self, include_timing: bool = True) -> list[list]:
        out = []
        for r in self.rows:
            for name, m in r.report.metrics.per_class().items():
                out.append([_fmt_fraction(r.fraction), r.seed, name, m.precision, m.recall, m.f1,
                            r.report.metrics.accuracy,
                            r.report.seconds if include_timing else ""])
        return out

    def write_csv(self, path, include_timing: bool = True) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_COLUMNS)
            for row in self.csv_rows(include_timing):
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "test_split_sha256": self.test_hash,
            "error": self.error,
            "rows": [{"fraction": r.fraction, "seed": r.seed, "n_labeled": r.n_labeled,
                      **r.report.to_dict(include_timing)} for r in self.rows],
        }

    def write_json(self, path, include_timing: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _fmt_fraction(f: float) -> str:
    return str(int(f)) if float(f).is_integer() else repr(float(f))


def _ablation_row(encoder: Checkpoint, train, test, fraction, seed, plan, head_hidden) -> AblationRow:
    labeled = subsample_labels(train, fraction, seed)
    t0 = time.perf_counter()
    model = build_classifier(encoder, head_hidden, seed, plan.dropout_mult)
    train_classifier(model, labeled, plan, seed)
    seconds = time.perf_counter() - t0
    report, _ = evaluate(model, test, labeled)
    report.seconds = seconds
    return AblationRow(fraction, seed, len(labeled), report)


def ablation_run(data: DatasetSplit, fractions: Sequence[float], seeds: Sequence[int],
                 encoder: Checkpoint, plan: FineTunePlan = CLASSIFIER_PLAN, head_hidden: int = 50,
                 workers: int = 1, on_row=None) -> AblationTable:
    """One classifier per (fraction, seed) on a shared, fixed test split.

    Rows come back ordered by (fraction, seed) whatever the completion order.
    If a row fails, the rows finished before it are kept and the error is
    recorded on the table before re-raising.
    """
    if not data.test:
        raise DataError("ablation needs a non-empty test split")
    jobs = [(f, s) for f in fractions for s in seeds]
    table = AblationTable(test_hash=split_hash(data.test))
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_ablation_row, encoder, data.train, data.test, f, s, plan, head_hidden)
                           for f, s in jobs]
                for fut in futures:
                    table.rows.append(fut.result())
                    if on_row is not None:
                        on_row(table.rows[-1])
        else:
            for f, s in jobs:
                table.rows.append(_ablation_row(encoder, data.train, data.test, f, s, plan, head_hidden))
                if on_row is not None:
                    on_row(table.rows[-1])
    except Exception as exc:
        table.error = f"{type(exc).__name__}: {exc}"
        exc.partial_table = table
        raise
    return table
