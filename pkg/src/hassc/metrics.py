"""Completion IoU and semantic mIoU over range crops."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .grid import GridDims, SemanticGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RangeCrop:
    """Evaluation window: ``extent`` metres along (forward, lateral, up)."""
    name: str
    extent: tuple[float, float, float]

    def voxel_window(self, dims: GridDims) -> tuple[slice, slice, slice]:
        """Forward axis starts at the ego edge, lateral axis is centred, z spans the extent from 0.

        Windows larger than the grid are clipped to it.
        """
        sizes = []
        for e in self.extent:
            n = e / dims.voxel_size
            if abs(n - round(n)) > 1e-6:
                raise ConfigError(f"crop {self.name}: {e} m is not a whole number of "
                                  f"{dims.voxel_size} m voxels")
            sizes.append(int(round(n)))
        nx, ny, nz = (min(s, d) for s, d in zip(sizes, dims.shape))
        y0 = (dims.y - ny) // 2
        return slice(0, nx), slice(y0, y0 + ny), slice(0, nz)

    def mask(self, dims: GridDims) -> np.ndarray:
        m = np.zeros(dims.shape, dtype=bool)
        m[self.voxel_window(dims)] = True
        return m


RANGES = {
    "S": RangeCrop("S", (12.8, 12.8, 6.4)),
    "M": RangeCrop("M", (25.6, 25.6, 6.4)),
    "L": RangeCrop("L", (51.2, 51.2, 6.4)),
}


class ConfusionMatrix:
    """``counts[pred, gt]`` over valid voxels."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add_labels(self, pred: np.ndarray, gt: np.ndarray):
        idx = pred.astype(np.int64) * self.num_classes + gt.astype(np.int64)
        self.counts += np.bincount(idx.ravel(), minlength=self.num_classes ** 2).reshape(
            self.num_classes, self.num_classes)
        return self

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the class is absent from both prediction and truth."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(1) - tp
        fn = self.counts.sum(0) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)

    def binary(self, empty_id: int = 0) -> "ConfusionMatrix":
        """Collapse to 2x2 (index 0 empty, 1 occupied)."""
        occ = np.ones(self.num_classes, dtype=bool)
        occ[empty_id] = False
        c = self.counts
        out = np.array([[c[~occ][:, ~occ].sum(), c[~occ][:, occ].sum()],
                        [c[occ][:, ~occ].sum(), c[occ][:, occ].sum()]], dtype=np.int64)
        return ConfusionMatrix(2, out)


def accumulate(cm: ConfusionMatrix, pred: SemanticGrid, gt: SemanticGrid,
               crop: RangeCrop | None = None) -> ConfusionMatrix:
    if pred.dims.shape != gt.dims.shape:
        raise ShapeError(f"prediction {pred.dims.shape} vs ground truth {gt.dims.shape}")
    keep = gt.valid & pred.valid
    if crop is not None:
        keep &= crop.mask(gt.dims)
    return cm.add_labels(pred.labels[keep], gt.labels[keep])


def miou(cm: ConfusionMatrix, include_empty: bool = False, empty_id: int = 0) -> float:
    iou = cm.per_class_iou()
    if not include_empty:
        iou = np.delete(iou, empty_id)
    iou = iou[~np.isnan(iou)]
    if iou.size == 0:
        log.warning("mIoU requested with no evaluable class; returning 0")
        return 0.0
    return float(iou.mean())


def iou_geometry(cm: ConfusionMatrix, empty_id: int = 0) -> float:
    """IoU of the occupied class. Accepts a full or already-binary matrix."""
    b = cm if cm.num_classes == 2 and empty_id == 0 else cm.binary(empty_id)
    v = b.per_class_iou()[1]
    if np.isnan(v):
        log.warning("IoU requested with no occupied voxels anywhere; returning 0")
        return 0.0
    return float(v)


def evaluate(pred: SemanticGrid, gt: SemanticGrid, ranges=("S", "M", "L")) -> dict:
    """Metrics per named range: ``{range: {iou, miou, per_class_iou}}``."""
    out = {}
    for name in ranges:
        cm = accumulate(ConfusionMatrix(gt.num_classes), pred, gt, RANGES[name])
        pc = cm.per_class_iou()
        out[name] = {
            "iou": iou_geometry(cm, gt.empty_id),
            "miou": miou(cm, empty_id=gt.empty_id),
            "per_class_iou": [None if np.isnan(v) else float(v) for v in pc],
        }
    return out


def report_json(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True) + "\n"


def report_csv(metrics: dict) -> str:
    lines = ["range,iou,miou," + ",".join(
        f"iou_class_{c}" for c in range(len(next(iter(metrics.values()))["per_class_iou"])))]
    for name, m in metrics.items():
        cells = ["" if v is None else repr(v) for v in m["per_class_iou"]]
        lines.append(",".join([name, repr(m["iou"]), repr(m["miou"])] + cells))
    return "\n".join(lines) + "\n"
