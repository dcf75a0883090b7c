"""Segmentation metrics over (H, W) masks and the evaluation report carrier.

Predictions are soft maps in [0,1]; ground truth is binary. region_j and
boundary_f binarize predictions at a threshold (default 0.5, inclusive).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DimensionError

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def _check_pair(pred: np.ndarray, gt: np.ndarray, op: str) -> None:
    if pred.ndim != 2 or gt.ndim != 2:
        raise DimensionError(f"{op}: masks must be 2-D, got {pred.shape} and {gt.shape}")
    if pred.shape != gt.shape:
        raise DimensionError(f"{op}: mask shapes {pred.shape} and {gt.shape} differ")


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute pixel difference between a soft mask and ground truth."""
    _check_pair(pred, gt, "mae")
    return float(np.abs(np.asarray(pred, dtype=np.float64) - gt).mean())


def region_j(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of the binarized prediction; 1 if both empty."""
    _check_pair(pred, gt, "region_j")
    p = np.asarray(pred) >= threshold
    g = np.asarray(gt) >= threshold
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _boundary(mask: np.ndarray) -> np.ndarray:
    # One-step erosion with the 4-connected cross; image border counts as
    # background, so object pixels on the border belong to the boundary.
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~eroded


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance: float | None = None,
               threshold: float = 0.5) -> float:
    """Harmonic mean of boundary precision/recall under a distance tolerance.

    Default tolerance is 0.008 * image diagonal, floored at 1 pixel.
    """
    _check_pair(pred, gt, "boundary_f")
    h, w = pred.shape
    if tolerance is None:
        tolerance = max(1.0, 0.008 * math.hypot(h, w))
    p = np.asarray(pred) >= threshold
    g = np.asarray(gt) >= threshold
    bp = _boundary(p)
    bg = _boundary(g)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    dist_to_g = ndimage.distance_transform_edt(~bg)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    precision = float((dist_to_g[bp] <= tolerance).mean())
    recall = float((dist_to_p[bg] <= tolerance).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class SequenceScore:
    sequence: str
    mean_j: float
    mean_f: float
    mae: float


@dataclass
class EvalReport:
    """Per-sequence scores plus their arithmetic-mean aggregate."""

    variant: str
    per_sequence: list[SequenceScore] = field(default_factory=list)

    @property
    def aggregate(self) -> SequenceScore:
        n = len(self.per_sequence)
        if n == 0:
            return SequenceScore("aggregate", float("nan"), float("nan"), float("nan"))
        return SequenceScore(
            "aggregate",
            sum(r.mean_j for r in self.per_sequence) / n,
            sum(r.mean_f for r in self.per_sequence) / n,
            sum(r.mae for r in self.per_sequence) / n,
        )

    def to_tsv(self) -> str:
        lines = ["variant\tsequence\tmean_j\tmean_f\tmae"]
        for row in self.per_sequence + [self.aggregate]:
            lines.append(f"{self.variant}\t{row.sequence}\t{row.mean_j:.6f}"
                         f"\t{row.mean_f:.6f}\t{row.mae:.6f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        agg = self.aggregate
        return {
            "variant": self.variant,
            "per_sequence": [
                {"sequence": r.sequence, "mean_j": r.mean_j, "mean_f": r.mean_f, "mae": r.mae}
                for r in self.per_sequence
            ],
            "aggregate": {"mean_j": agg.mean_j, "mean_f": agg.mean_f, "mae": agg.mae},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        report = cls(variant=d["variant"])
        for r in d["per_sequence"]:
            report.per_sequence.append(
                SequenceScore(r["sequence"], r["mean_j"], r["mean_f"], r["mae"]))
        return report
