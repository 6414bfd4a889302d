"""Classification metrics, confidence intervals and agreement analysis."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyMatrix, MismatchedTestSets, RowSumMismatch
from .phonology import PropertyKind, builtin_taxonomy

REPORT_FORMAT = "phonorec.evalreport/1"


def order_codes(kind: PropertyKind | None, codes: Iterable[str]) -> tuple[str, ...]:
    """Distinct codes in taxonomy order; codes outside the taxonomy go last, sorted."""
    codes = set(codes)
    if kind is None:
        return tuple(sorted(codes))
    tax = builtin_taxonomy()
    known = [c for c in tax.codes(kind) if c in codes]
    return tuple(known) + tuple(sorted(codes - set(known)))


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    classes: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.classes)
        if counts.shape != (k, k):
            raise ValueError(f"{k} classes but counts of shape {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_labels(cls, true: Sequence[str], pred: Sequence[str],
                    classes: Sequence[str] | None = None,
                    kind: PropertyKind | None = None) -> "ConfusionMatrix":
        if len(true) != len(pred):
            raise ValueError("true and predicted label lists differ in length")
        if classes is None:
            classes = order_codes(kind, list(true) + list(pred))
        else:
            classes = tuple(classes) + tuple(
                c for c in order_codes(kind, list(true) + list(pred)) if c not in set(classes))
        pos = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for t, p in zip(true, pred):
            counts[pos[t], pos[p]] += 1
        return cls(tuple(classes), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - np.diag(self.counts)

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - np.diag(self.counts)

    def tn(self) -> np.ndarray:
        return self.total - self.tp() - self.fp() - self.fn()

    def to_json(self) -> dict:
        return {"classes": list(self.classes), "counts": self.counts.tolist()}

    @classmethod
    def from_json(cls, d: Mapping) -> "ConfusionMatrix":
        return cls(tuple(d["classes"]), np.array(d["counts"], dtype=np.int64))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    balanced_accuracy: float
    micro_precision: float
    micro_recall: float
    macro_precision: float
    macro_recall: float
    mcc: float
    # classes with support whose precision was undefined (never predicted)
    undefined_precision: tuple[str, ...] = ()

    NAMES = ("accuracy", "balanced_accuracy", "micro_precision", "micro_recall",
             "macro_precision", "macro_recall", "mcc")

    def as_dict(self) -> dict:
        d = {n: getattr(self, n) for n in self.NAMES}
        d["undefined_precision"] = list(self.undefined_precision)
        return d


def multiclass_mcc(counts: np.ndarray) -> float:
    """Gorodkin's R_K; 0 when either marginal is constant."""
    c = np.asarray(counts, dtype=np.float64)
    s = c.sum()
    correct = np.trace(c)
    pred = c.sum(axis=0)
    true = c.sum(axis=1)
    cov_xy = correct * s - pred @ true
    cov_xx = s * s - pred @ pred
    cov_yy = s * s - true @ true
    if cov_xx == 0 or cov_yy == 0:
        return 0.0
    return float(cov_xy / math.sqrt(cov_xx * cov_yy))


def binary_mcc(tp: float, tn: float, fp: float, fn: float) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Metric set of a single-label confusion matrix.

    Balanced accuracy and the macro averages run over the classes with
    nonzero support; a supported class that is never predicted contributes
    precision 0 and is listed in ``undefined_precision``.
    """
    total = cm.total
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    tp = cm.tp()
    support = cm.counts.sum(axis=1)
    predicted = cm.counts.sum(axis=0)
    present = support > 0
    recalls = tp[present] / support[present]
    precisions = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)[present]
    undefined = tuple(c for c, s, p in zip(cm.classes, support, predicted) if s > 0 and p == 0)
    acc = float(tp.sum() / total)
    bal = float(recalls.mean())
    return Metrics(
        accuracy=acc,
        balanced_accuracy=bal,
        micro_precision=acc,
        micro_recall=acc,
        macro_precision=float(precisions.mean()),
        macro_recall=bal,
        mcc=multiclass_mcc(cm.counts),
        undefined_precision=undefined,
    )


def accuracy_ci(p_hat: float, n: int, alpha: float = 0.05) -> float:
    """Half-width of the normal-approximation interval for a proportion."""
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError("p_hat must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be at least 1")
    z = NormalDist().inv_cdf(1.0 - alpha / 2.0)
    return z * math.sqrt(p_hat * (1.0 - p_hat) / n)


def fleiss_kappa(ratings, n_raters: int | None = None) -> float:
    """Fleiss' kappa of an items x categories count matrix.

    Returns ``nan`` when chance agreement is 1 (kappa undefined).
    """
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 2:
        raise ValueError("ratings must be an items x categories matrix with at least 2 items")
    rows = r.sum(axis=1)
    n = float(rows[0]) if n_raters is None else float(n_raters)
    if not np.all(rows == n):
        raise RowSumMismatch(f"every item must have {n:g} ratings")
    if n < 2:
        raise ValueError("Fleiss' kappa needs at least two raters")
    items = r.shape[0]
    p_item = ((r * r).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_item.mean()
    p_cat = r.sum(axis=0) / (items * n)
    p_e = float(p_cat @ p_cat)
    if math.isclose(p_e, 1.0, rel_tol=0.0, abs_tol=1e-15):
        return math.nan
    return float((p_bar - p_e) / (1.0 - p_e))


# -- reports -----------------------------------------------------------------------


@dataclass
class EvalReport:
    property: PropertyKind
    mode: str
    model: str
    records: list[tuple[str, str, str]]  # (video_id, true, predicted)
    confusion: ConfusionMatrix
    metrics: Metrics
    ci: float
    tracker: str = ""
    classes: tuple[str, ...] = ()

    @classmethod
    def build(cls, kind: PropertyKind, mode: str, model: str,
              rows: Sequence[tuple[str, str, str]], classes: Sequence[str] = (),
              tracker: str = "", alpha: float = 0.05) -> "EvalReport":
        rows = sorted((str(v), t, p) for v, t, p in rows)
        cm = ConfusionMatrix.from_labels([t for _, t, _ in rows], [p for _, _, p in rows],
                                         classes=order_codes(kind, classes), kind=kind)
        m = metrics(cm)
        return cls(kind, mode, model, rows, cm, m, accuracy_ci(m.accuracy, len(rows), alpha),
                   tracker, tuple(cm.classes))

    def errors(self) -> set[str]:
        return {v for v, t, p in self.records if t != p}

    def ids(self) -> set[str]:
        return {v for v, _, _ in self.records}

    def to_json(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "property": self.property.value,
            "mode": self.mode,
            "model": self.model,
            "tracker": self.tracker,
            "classes": list(self.classes),
            "metrics": self.metrics.as_dict(),
            "ci": self.ci,
            "n": len(self.records),
            "confusion": self.confusion.to_json(),
            "records": [{"video_id": v, "true": t, "pred": p} for v, t, p in self.records],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_json(cls, d: Mapping) -> "EvalReport":
        m = dict(d["metrics"])
        undefined = tuple(m.pop("undefined_precision", ()))
        return cls(PropertyKind(d["property"]), d["mode"], d["model"],
                   [(r["video_id"], r["true"], r["pred"]) for r in d["records"]],
                   ConfusionMatrix.from_json(d["confusion"]),
                   Metrics(**m, undefined_precision=undefined), d["ci"],
                   d.get("tracker", ""), tuple(d.get("classes", ())))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class AgreementReport:
    property: PropertyKind
    ids: list[str]
    categories: tuple[str, ...]
    ratings: np.ndarray  # items x categories
    kappa: float | None
    predictions: dict[str, dict[str, str]] = field(default_factory=dict)  # id -> model -> pred
    category_space: str = "all classes of the task"

    def to_json(self) -> dict:
        return {
            "property": self.property.value,
            "jointly_misclassified": self.ids,
            "categories": list(self.categories),
            "category_space": self.category_space,
            "ratings": self.ratings.tolist(),
            "kappa": self.kappa,
            "predictions": self.predictions,
        }


def joint_misclassified(reports: Sequence[EvalReport]):
    """Ids every model gets wrong, with per-id vote counts over the task's classes.

    Returns ``(ids, ratings, categories)``.
    """
    if not reports:
        raise ValueError("need at least one report")
    base = reports[0].ids()
    for r in reports[1:]:
        if r.ids() != base:
            raise MismatchedTestSets("reports were computed on different test sets")
    kind = reports[0].property
    truth = {v: t for v, t, _ in reports[0].records}
    for r in reports[1:]:
        for v, t, _ in r.records:
            if truth[v] != t:
                raise MismatchedTestSets(f"reports disagree on the true label of {v}")
    ids = sorted(set.intersection(*(r.errors() for r in reports)))
    cats = order_codes(kind, [c for r in reports for c in r.classes]
                       + [p for r in reports for _, _, p in r.records] + list(truth.values()))
    pos = {c: i for i, c in enumerate(cats)}
    ratings = np.zeros((len(ids), len(cats)), dtype=np.int64)
    row = {v: i for i, v in enumerate(ids)}
    for r in reports:
        for v, _, p in r.records:
            if v in row:
                ratings[row[v], pos[p]] += 1
    return ids, ratings, cats


def agreement(reports: Sequence[EvalReport]) -> AgreementReport:
    ids, ratings, cats = joint_misclassified(reports)
    kappa = None
    if len(ids) >= 2 and len(reports) >= 2:
        k = fleiss_kappa(ratings, len(reports))
        kappa = None if math.isnan(k) else k
    preds = {v: {} for v in ids}
    wanted = set(ids)
    for i, r in enumerate(reports):
        name = r.model or f"model{i}"
        for v, _, p in r.records:
            if v in wanted:
                preds[v][name] = p
    return AgreementReport(reports[0].property, ids, cats, ratings, kappa, preds)


@dataclass(frozen=True)
class CrossTaskRate:
    tasks: int
    videos: int
    misclassified: int

    @property
    def rate(self) -> float | None:
        return self.misclassified / self.videos if self.videos else None

    def to_json(self) -> dict:
        return {"tasks": self.tasks, "videos": self.videos, "misclassified": self.misclassified,
                "rate": self.rate}


def cross_task_misclassification(joint_errors: Mapping[str, set],
                                 test_sets: Mapping[str, set]) -> dict[int, CrossTaskRate]:
    """For m = 2..#tasks: among videos in exactly m tasks' test sets, how many
    were jointly misclassified on all of them."""
    if len(test_sets) < 2:
        raise ValueError("need at least two tasks")
    membership: dict[str, list[str]] = defaultdict(list)
    for task, ids in test_sets.items():
        for v in ids:
            membership[v].append(task)
    out = {}
    for m in range(2, len(test_sets) + 1):
        vids = [v for v, tasks in membership.items() if len(tasks) == m]
        bad = sum(1 for v in vids if all(v in joint_errors.get(t, ()) for t in membership[v]))
        out[m] = CrossTaskRate(m, len(vids), bad)
    return out


# -- tables ---------------------------------------------------------------------------


def _row_name(r: EvalReport) -> str:
    return f"{r.model}[{r.tracker}]" if r.tracker else r.model


def render_table(reports: Sequence[EvalReport], fmt: str = "text") -> str:
    """Accuracy-with-CI and balanced-accuracy table, one row per model and mode."""
    kinds = [k for k in PropertyKind if any(r.property is k for r in reports)]
    rows: dict[tuple[str, str], dict[PropertyKind, EvalReport]] = {}
    for r in reports:
        rows.setdefault((r.mode, _row_name(r)), {})[r.property] = r
    header = ["mode", "model"]
    for k in kinds:
        header += [f"{k.value} A", f"{k.value} Abar"]
    body = []
    for (mode, name), cells in sorted(rows.items()):
        line = [mode, name]
        for k in kinds:
            r = cells.get(k)
            if r is None:
                line += ["", ""]
            else:
                line += [f"{100 * r.metrics.accuracy:.1f} ± {100 * r.ci:.1f}",
                         f"{100 * r.metrics.balanced_accuracy:.1f}"]
        body.append(line)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(body)
        return buf.getvalue()
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(line, widths)).rstrip()
             for line in [header] + body]
    return "\n".join(lines) + "\n"
