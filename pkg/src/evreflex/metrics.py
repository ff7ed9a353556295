"""Evaluation metrics: flow endpoint error, thresholded danger segmentation
scores per semantic class, the nearest-object depth baseline, and angle errors
between 3-D obstacle motion vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .types import FloatMap, FlowField, ShapeMismatchError, UndefinedMetricError

__all__ = [
    "FlowErrorStats",
    "ClassScore",
    "ClassScores",
    "AaeReport",
    "OUTLIER_EE_PX",
    "flow_aee",
    "prf1",
    "depth_baseline",
    "angle_error",
    "aae_report",
]

OUTLIER_EE_PX = 3.0


@dataclass(frozen=True)
class FlowErrorStats:
    aee: float  # mean endpoint error, px
    outlier_pct: float  # % of pixels with EE > OUTLIER_EE_PX
    pixel_count: int


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class ClassScores:
    """Per-class and overall precision/recall/F1 for a danger segmentation."""

    per_class: dict[int, ClassScore]
    overall: ClassScore


@dataclass(frozen=True)
class AaeReport:
    aae_deg: float
    aae_top10_deg: Optional[float]  # None when fewer than 10 samples
    count: int


def flow_aee(
    pred: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None
) -> FlowErrorStats:
    """Average endpoint error and >3 px outlier rate over the masked pixels."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeMismatchError("flow field dimensions differ")
    ee = np.hypot(
        pred.u.astype(np.float64) - gt.u.astype(np.float64),
        pred.v.astype(np.float64) - gt.v.astype(np.float64),
    )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != ee.shape:
            raise ShapeMismatchError("mask dimensions differ from the flow fields")
        ee = ee[mask]
    count = int(ee.size)
    if count == 0:
        raise UndefinedMetricError("flow AEE over an empty mask is undefined")
    return FlowErrorStats(
        aee=float(ee.mean()),
        outlier_pct=float(100.0 * np.count_nonzero(ee > OUTLIER_EE_PX) / count),
        pixel_count=count,
    )


def _score(tp: int, fp: int, fn: int) -> ClassScore:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ClassScore(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)


def prf1(pred_mask: np.ndarray, gt_mask: np.ndarray, class_map: FloatMap) -> ClassScores:
    """Precision/recall/F1 per semantic class and overall.

    Each class is scored on its own pixels (gt positives attributed by the
    class of the pixel); the overall score runs over all pixels.  Classes with
    no support report zeros rather than raising, so batch evaluation survives
    scenes where a class is absent.
    """
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    classes = np.asarray(class_map.values)
    if not (pred.shape == gt.shape == classes.shape):
        raise ShapeMismatchError("mask and class map dimensions differ")
    per_class: dict[int, ClassScore] = {}
    for cid in sorted(int(c) for c in np.unique(classes)):
        sel = classes == cid
        per_class[cid] = _score(
            tp=int(np.count_nonzero(pred & gt & sel)),
            fp=int(np.count_nonzero(pred & ~gt & sel)),
            fn=int(np.count_nonzero(~pred & gt & sel)),
        )
    overall = _score(
        tp=int(np.count_nonzero(pred & gt)),
        fp=int(np.count_nonzero(pred & ~gt)),
        fn=int(np.count_nonzero(~pred & gt)),
    )
    return ClassScores(per_class=per_class, overall=overall)


def depth_baseline(d: FloatMap, threshold_m: float) -> np.ndarray:
    """Naive danger mask: anything valid closer than threshold_m metres."""
    if threshold_m <= 0:
        raise ValueError("threshold_m must be positive")
    values = np.asarray(d.values)
    return (values > 0) & (values < threshold_m)


def angle_error(pred_vec, gt_vec) -> float:
    """Angle in degrees between two nonzero 3-vectors."""
    a = np.asarray(pred_vec, dtype=np.float64)
    b = np.asarray(gt_vec, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("angle between zero vectors is undefined")
    cos = float(np.dot(a, b) / (na * nb))
    return math.degrees(math.acos(max(-1.0, min(1.0, cos))))


def aae_report(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> AaeReport:
    """Average angle error over (pred, gt) motion-vector pairs.

    The top-10% figure averages the samples whose ground-truth magnitude falls
    in the top decile (ties broken by sample order); it needs at least 10
    samples and is reported as None otherwise.
    """
    if not pairs:
        raise UndefinedMetricError("no motion vector pairs")
    errors = np.array([angle_error(p, g) for p, g in pairs], dtype=np.float64)
    mags = np.array([np.linalg.norm(np.asarray(g, dtype=np.float64)) for _, g in pairs])
    n = len(pairs)
    top10 = None
    if n >= 10:
        k = n // 10
        order = np.argsort(-mags, kind="stable")[:k]
        top10 = float(errors[order].mean())
    return AaeReport(aae_deg=float(errors.mean()), aae_top10_deg=top10, count=n)
