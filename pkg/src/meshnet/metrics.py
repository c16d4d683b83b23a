"""Per-class overlap and volume metrics computed from one-vs-rest confusion counts.

DICE, precision, recall and F-beta are evaluated in exact rational
arithmetic and rounded once, so DICE and F1 agree bit for bit.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeMismatch, UndefinedMetric
from .volume import LabelVolume

DEFAULT_CLASS_NAMES = {3: ("none", "gray", "white"), 4: ("none", "csf", "gray", "white")}


def class_names(n: int) -> tuple[str, ...]:
    return DEFAULT_CLASS_NAMES.get(n, tuple(f"class{c}" for c in range(n)))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def volumes(self, c: int) -> tuple[int, int]:
        """(V_p, V_g): predicted and ground-truth voxel counts of class c."""
        return int(self.tp[c] + self.fp[c]), int(self.tp[c] + self.fn[c])


def confusion(pred: LabelVolume, truth: LabelVolume) -> ConfusionCounts:
    if pred.dims != truth.dims or pred.num_classes != truth.num_classes:
        raise ShapeMismatch(f"pred {pred.dims}/{pred.num_classes} vs truth {truth.dims}/{truth.num_classes}")
    n = pred.num_classes
    joint = np.bincount(pred.labels.ravel().astype(np.int64) * n + truth.labels.ravel(), minlength=n * n)
    joint = joint.reshape(n, n)  # [pred, truth]
    tp = np.diag(joint).copy()
    fp = joint.sum(axis=1) - tp
    fn = joint.sum(axis=0) - tp
    tn = pred.labels.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int, what: str) -> Fraction:
    if den == 0:
        raise UndefinedMetric(f"{what} undefined: zero denominator")
    return Fraction(num, den)


def dice(counts: ConfusionCounts, c: int) -> float:
    tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
    return float(_ratio(2 * tp, 2 * tp + fn + fp, f"DICE of class {c}"))


def precision(counts: ConfusionCounts, c: int) -> float:
    return float(_precision(counts, c))


def recall(counts: ConfusionCounts, c: int) -> float:
    return float(_recall(counts, c))


def _precision(counts, c) -> Fraction:
    tp, fp = int(counts.tp[c]), int(counts.fp[c])
    return _ratio(tp, tp + fp, f"precision of class {c}")


def _recall(counts, c) -> Fraction:
    tp, fn = int(counts.tp[c]), int(counts.fn[c])
    return _ratio(tp, tp + fn, f"recall of class {c}")


def f_beta(counts: ConfusionCounts, c: int, beta: float = 1.0) -> float:
    """(1+b^2) P R / (b^2 P + R), written over counts so it stays defined when TP = 0."""
    tp, fp, fn = int(counts.tp[c]), int(counts.fp[c]), int(counts.fn[c])
    b2 = Fraction(beta) ** 2
    return float(_ratio((1 + b2) * tp, (1 + b2) * tp + b2 * fn + fp, f"F-beta of class {c}"))


def avd(pred: LabelVolume, truth: LabelVolume, c: int) -> float:
    """Average volume difference in percent: 100 * |V_p - V_g| / V_g."""
    vp = int(np.count_nonzero(pred.labels == c))
    vg = int(np.count_nonzero(truth.labels == c))
    return _avd(vp, vg, c)


def avd_from_counts(counts: ConfusionCounts, c: int) -> float:
    return _avd(*counts.volumes(c), c)


def _avd(vp: int, vg: int, c: int) -> float:
    if vg == 0:
        raise UndefinedMetric(f"AVD of class {c} undefined: class absent from ground truth")
    return float(Fraction(100 * abs(vp - vg), vg))


def avd_intersection(counts: ConfusionCounts, c: int) -> float:
    """Intersection-over-truth-volume reading, 100 * |V_p & V_g| / V_g.  Not used in reports."""
    vg = counts.volumes(c)[1]
    if vg == 0:
        raise UndefinedMetric(f"AVD of class {c} undefined: class absent from ground truth")
    return float(Fraction(100 * int(counts.tp[c]), vg))


def _maybe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric:
        return None


@dataclass(frozen=True)
class ClassReport:
    name: str
    dice: float | None
    avd: float | None
    precision: float | None
    recall: float | None
    v_pred: int
    v_truth: int


@dataclass(frozen=True)
class SegmentationReport:
    classes: tuple[ClassReport, ...]
    counts: ConfusionCounts

    def dice(self) -> dict[str, float | None]:
        return {c.name: c.dice for c in self.classes}

    def mean_dice(self, skip_background: bool = False) -> float:
        vals = [c.dice for i, c in enumerate(self.classes)
                if c.dice is not None and not (skip_background and i == 0)]
        return float(np.mean(vals))

    def to_text(self) -> str:
        def fmt(v, pct=False):
            if v is None:
                return "absent"
            return f"{v:.2f}%" if pct else f"{v:.4f}"

        lines = []
        for c in self.classes:
            lines.append(f"{c.name}: dice={fmt(c.dice)} avd={fmt(c.avd, True)} "
                         f"precision={fmt(c.precision)} recall={fmt(c.recall)}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice", "avd_percent", "precision", "recall", "v_pred", "v_truth"])
        for c in self.classes:
            w.writerow([c.name] + ["" if v is None else repr(v) for v in (c.dice, c.avd, c.precision, c.recall)]
                       + [c.v_pred, c.v_truth])
        return buf.getvalue()


def evaluate(pred: LabelVolume, truth: LabelVolume, names=None) -> SegmentationReport:
    counts = confusion(pred, truth)
    names = names or class_names(pred.num_classes)
    rows = []
    for c in range(pred.num_classes):
        vp, vg = counts.volumes(c)
        rows.append(ClassReport(names[c], _maybe(dice, counts, c), _maybe(avd_from_counts, counts, c),
                                _maybe(precision, counts, c), _maybe(recall, counts, c), vp, vg))
    return SegmentationReport(tuple(rows), counts)
