"""Inverse time-to-impact maps from depth pairs and optical flow.

Units: flow is px/frame, depth is metres; dividing the per-frame fractional
range closure by the frame interval dt gives inverse TTI in 1/s, so "collides
within H seconds" is the threshold tau >= 1/H.  All producers clamp at zero:
receding surfaces carry no danger.

Validity masks combine depth validity (sentinel 0 marks holes), warp validity
(sample stayed inside the raster) and an occlusion guard that rejects samples
whose bilinear footprint straddles a depth discontinuity, where interpolated
depth would blend foreground and background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import (
    FloatMap,
    FlowField,
    MapSemantics,
    ShapeMismatchError,
    UndefinedMetricError,
    float_map,
)

__all__ = [
    "TtiMap",
    "ground_truth_inverse_tti",
    "estimate_tti_static",
    "estimate_tti_dynamic",
    "tti_mse",
    "threshold_collision",
    "OCCLUSION_JUMP_RATIO",
]

# A warp footprint whose depth spread exceeds this fraction of the current
# depth is treated as straddling an occlusion boundary and marked invalid.
OCCLUSION_JUMP_RATIO = 0.25


@dataclass(frozen=True, eq=False)
class TtiMap:
    """Inverse TTI raster (1/s) with its frame interval and validity mask."""

    tti: FloatMap
    dt: float
    valid: np.ndarray

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.valid.shape != self.tti.values.shape:
            raise ShapeMismatchError("validity mask shape differs from the tti raster")

    @property
    def values(self) -> np.ndarray:
        return self.tti.values


def _depth(fmap: FloatMap) -> np.ndarray:
    return np.asarray(fmap.values, dtype=np.float64)


def _warp_depth(depth: np.ndarray, flow: FlowField):
    """Bilinear depth sample at i + F(i).

    Returns (values, in_bounds, footprint_ok) where footprint_ok requires all
    four interpolation corners to hold valid depth with a bounded spread.
    """
    h, w = depth.shape
    u = np.asarray(flow.u, dtype=np.float64)
    v = np.asarray(flow.v, dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs = xs + u
    ys = ys + v
    in_bounds = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), w - 2 if w > 1 else 0)
    y0 = np.minimum(np.floor(yc).astype(np.intp), h - 2 if h > 1 else 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    corners = np.stack([depth[y0, x0], depth[y0, x1], depth[y1, x0], depth[y1, x1]])
    top = corners[0] + fx * (corners[1] - corners[0])
    bottom = corners[2] + fx * (corners[3] - corners[2])
    values = top + fy * (bottom - top)
    spread = corners.max(axis=0) - corners.min(axis=0)
    footprint_ok = np.all(corners > 0, axis=0) & (spread <= OCCLUSION_JUMP_RATIO * corners.min(axis=0))
    return values, in_bounds, footprint_ok


def _check_dims(flow: FlowField, *maps: FloatMap):
    shape = (flow.height, flow.width)
    for fmap in maps:
        if (fmap.height, fmap.width) != shape:
            raise ShapeMismatchError(
                f"map shape {(fmap.height, fmap.width)} differs from flow shape {shape}"
            )


def _clamped_tti(numerator, d_curr, dt, valid) -> TtiMap:
    tau = np.zeros(d_curr.shape, dtype=np.float64)
    np.divide(numerator, d_curr * dt, out=tau, where=valid)
    np.maximum(tau, 0.0, out=tau)
    tau[~valid] = 0.0
    return TtiMap(
        tti=float_map(tau, MapSemantics.INV_TTI_S),
        dt=float(dt),
        valid=valid.copy(),
    )


def ground_truth_inverse_tti(
    d_prev: FloatMap,
    d_curr: FloatMap,
    flow_to_prev: FlowField,
    dt: float,
    occlusion_guard: bool = True,
) -> TtiMap:
    """Per-frame fractional range closure from warped previous depth.

    tau(i) = max(0, (d_prev(i + F(i)) - d_curr(i)) / (d_curr(i) * dt)) with
    flow_to_prev mapping current-frame pixels to their previous-frame locations.
    Approaching surfaces give positive tau; receding ones clamp to zero.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_dims(flow_to_prev, d_prev, d_curr)
    curr = _depth(d_curr)
    warped, in_bounds, footprint_ok = _warp_depth(_depth(d_prev), flow_to_prev)
    valid = in_bounds & (curr > 0)
    if occlusion_guard:
        valid &= footprint_ok
    else:
        valid &= warped > 0
    return _clamped_tti(warped - curr, curr, dt, valid)


def estimate_tti_static(flow: FlowField, d_curr: FloatMap, dt: float) -> TtiMap:
    """Divergence-based inverse TTI from flow alone.

    For fronto-parallel approach the flow field expands radially with
    div F = 2/TTC per frame, so tau = div F / (2 dt).  Depth only gates
    validity here (and rides along for the policy's 3-D lifting).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_dims(flow, d_curr)
    du_dx = np.gradient(np.asarray(flow.u, dtype=np.float64), axis=1)
    dv_dy = np.gradient(np.asarray(flow.v, dtype=np.float64), axis=0)
    curr = _depth(d_curr)
    valid = curr > 0
    tau = np.maximum((du_dx + dv_dy) / (2.0 * dt), 0.0)
    tau[~valid] = 0.0
    return TtiMap(tti=float_map(tau, MapSemantics.INV_TTI_S), dt=float(dt), valid=valid)


def estimate_tti_dynamic(
    flow: FlowField,
    d_curr: FloatMap,
    d_next: FloatMap,
    dt: float,
    occlusion_guard: bool = True,
) -> TtiMap:
    """Inverse TTI from the next depth frame warped by forward flow.

    tau(i) = max(0, (d_curr(i) - d_next(i + F(i))) / (d_curr(i) * dt)); flow
    maps current-frame pixels to their next-frame locations.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_dims(flow, d_curr, d_next)
    curr = _depth(d_curr)
    warped, in_bounds, footprint_ok = _warp_depth(_depth(d_next), flow)
    valid = in_bounds & (curr > 0)
    if occlusion_guard:
        valid &= footprint_ok
    else:
        valid &= warped > 0
    return _clamped_tti(curr - warped, curr, dt, valid)


def tti_mse(pred: TtiMap, gt: TtiMap) -> float:
    """Mean squared difference over jointly valid pixels."""
    if pred.values.shape != gt.values.shape:
        raise ShapeMismatchError("tti map shapes differ")
    if abs(pred.dt - gt.dt) > 1e-12:
        raise ValueError(f"frame intervals differ: {pred.dt} vs {gt.dt}")
    joint = pred.valid & gt.valid
    if not joint.any():
        raise UndefinedMetricError("no jointly valid pixels")
    diff = pred.values.astype(np.float64) - gt.values.astype(np.float64)
    return float(np.mean(diff[joint] ** 2))


def threshold_collision(t: TtiMap, horizon: float) -> np.ndarray:
    """Binary danger mask: valid pixels projected to collide within `horizon` seconds."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    return t.valid & (t.values >= 1.0 / horizon)
