"""Confusion-matrix segmentation metrics (Acc, mIoU, fwIoU) on the 19 Cityscapes classes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

IGNORE = 255
CLASS_NAMES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic_light",
    "traffic_sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle",
)
NUM_CLASSES = len(CLASS_NAMES)
FOREGROUND = (6, 7, 11, 12, 13, 14, 15, 16, 17, 18)


def check_labels(arr, num_classes=NUM_CLASSES):
    """Return ``arr`` as an integer array, raising on any value outside 0..K-1 / 255."""
    a = np.asarray(arr)
    if a.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise ValidationError("label values must be integers")
        a = a.astype(np.int64)
    bad = (a != IGNORE) & ((a < 0) | (a >= num_classes))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"illegal label value {a[pos]} at {pos}")
    return a


@dataclass(frozen=True, eq=False)
class LabelMap:
    data: np.ndarray

    def __post_init__(self):
        a = check_labels(self.data)
        if a.ndim != 2:
            raise DimensionError("a label map is H x W")
        a = a.astype(np.uint8)
        a.flags.writeable = False
        object.__setattr__(self, "data", a)

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        return isinstance(other, LabelMap) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns prediction."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes=NUM_CLASSES):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def _raw(x):
    return x.data if isinstance(x, LabelMap) else np.asarray(x)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    """Return a new matrix with ``counts[gt, pred]`` incremented per non-ignored pixel."""
    pred, gt = _raw(pred), _raw(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    k = cm.num_classes
    gt = check_labels(gt, k)
    pred = check_labels(pred, k)
    keep = gt != IGNORE
    g = gt[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if np.any(p == IGNORE):
        raise ValidationError("prediction is 255 on a labeled pixel")
    add = np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + add)


def metrics(cm: ConfusionMatrix, strict=False):
    """Acc, mIoU, fwIoU and per-class IoU.

    A class whose union is empty has IoU ``None`` and is left out of the mean,
    unless ``strict`` is set, in which case it counts as 0 over all classes.
    An empty matrix yields ``None`` everywhere.
    """
    c = cm.counts.astype(np.float64)
    k = cm.num_classes
    total = c.sum()
    if total == 0:
        return {"acc": None, "miou": None, "fwiou": None, "per_class_iou": [None] * k}
    tp = np.diag(c)
    gt_k = c.sum(axis=1)
    union = gt_k + c.sum(axis=0) - tp
    defined = union > 0
    iou = np.where(defined, tp / np.where(defined, union, 1), 0.0)
    per_class = [float(v) if d else None for v, d in zip(iou, defined)]
    miou = float(iou.mean()) if strict else float(iou[defined].mean())
    freq = gt_k / total
    fwiou = float((freq[defined] * iou[defined]).sum())
    return {"acc": float(tp.sum() / total), "miou": miou, "fwiou": fwiou,
            "per_class_iou": per_class}


def evaluate(preds, gts, num_classes=NUM_CLASSES):
    cm = ConfusionMatrix.zeros(num_classes)
    for p, g in zip(preds, gts):
        cm = accumulate(cm, p, g)
    return cm
