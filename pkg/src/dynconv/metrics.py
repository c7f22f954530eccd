"""Task metrics and cost accounting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ValidationError

FLOP_CATEGORIES = ("convolution", "attention-generator", "dense", "other")


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if predictions.size == 0:
        raise ValidationError("accuracy of an empty prediction set is undefined")
    if predictions.shape != labels.shape:
        raise ValidationError(f"length mismatch: {predictions.size} predictions vs {labels.size} labels")
    return float(np.mean(predictions == labels))


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    @classmethod
    def from_masks(cls, pred, gt, num_classes: int) -> "ConfusionCounts":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        gt = np.asarray(gt).reshape(-1).astype(np.int64)
        if pred.shape != gt.shape:
            raise ValidationError(f"mask shapes differ: {np.shape(pred)} vs {np.shape(gt)}")
        for name, m in (("pred", pred), ("gt", gt)):
            if m.size and (m.min() < 0 or m.max() >= num_classes):
                raise ValidationError(f"{name} mask has labels outside [0, {num_classes})")
        cm = np.bincount(gt * num_classes + pred, minlength=num_classes**2).reshape(num_classes, num_classes)
        tp = np.diag(cm)
        return cls(tp=tp, fp=cm.sum(axis=0) - tp, fn=cm.sum(axis=1) - tp)

    def iou(self) -> np.ndarray:
        denom = self.tp + self.fp + self.fn
        # a class absent from both masks counts as perfectly handled
        return np.where(denom > 0, self.tp / np.maximum(denom, 1), 1.0)


def miou(pred_mask, gt_mask, num_classes: int) -> float:
    if np.shape(pred_mask) != np.shape(gt_mask):
        raise ValidationError(f"mask shapes differ: {np.shape(pred_mask)} vs {np.shape(gt_mask)}")
    return float(ConfusionCounts.from_masks(pred_mask, gt_mask, num_classes).iou().mean())


@dataclass
class FoldResult:
    fold_index: int
    loss: float
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError(f"fold accuracy must lie in [0, 1], got {self.accuracy}")


def kfold_stats(folds) -> tuple[float, float]:
    """Mean accuracy and population standard deviation (divisor n)."""
    accs = np.array([f.accuracy if isinstance(f, FoldResult) else float(f) for f in folds])
    if accs.size < 2:
        raise ValidationError(f"k-fold statistics need at least 2 folds, got {accs.size}")
    return float(accs.mean()), float(accs.std(ddof=0))


# --- FLOPs ------------------------------------------------------------------


def flops_conv2d(cin: int, cout: int, kh: int, kw: int, hout: int, wout: int) -> int:
    """Multiply-accumulates counted as 2 FLOPs; bias ignored."""
    return 2 * cout * cin * kh * kw * hout * wout


def flops_dense(fan_in: int, fan_out: int) -> int:
    return 2 * fan_in * fan_out


@dataclass
class FlopReport:
    per_layer: list = field(default_factory=list)  # (layer path, category, flops)
    total: int = 0
    breakdown: dict = field(default_factory=dict)

    @classmethod
    def from_charges(cls, charges) -> "FlopReport":
        merged: dict[tuple[str, str], int] = {}
        for path, category, amount in charges:
            if category not in FLOP_CATEGORIES:
                raise ValidationError(f"unknown FLOP category {category!r}")
            merged[(path, category)] = merged.get((path, category), 0) + int(amount)
        per_layer = [(p, c, f) for (p, c), f in merged.items()]
        breakdown = {c: sum(f for _, cc, f in per_layer if cc == c) for c in FLOP_CATEGORIES}
        return cls(per_layer, sum(f for _, _, f in per_layer), breakdown)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "breakdown": dict(self.breakdown),
            "per_layer": [{"layer": p, "category": c, "flops": f} for p, c, f in self.per_layer],
        }


def flops_model(model, batch: int = 1) -> FlopReport:
    """Per-sample inference cost of ``model`` traced on a zero input."""
    return FlopReport.from_charges(model.trace_flops(batch))
