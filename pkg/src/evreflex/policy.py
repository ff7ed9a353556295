"""Evasion policy: aggregate flow/depth/TTI into an obstacle motion vector and
pick a direction perpendicular to it and to the agent's egomotion.

The policy has no notion of whether the resulting motion is itself safe; it
exists to move away from the most imminent obstacle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .types import CameraModel, FloatMap, FlowField, ShapeMismatchError
from .tti import TtiMap

__all__ = ["EgoMotion", "EvasionResult", "obstacle_motion_vector", "evasion_direction"]

_DEGENERATE_CROSS = 1e-9


@dataclass(frozen=True)
class EgoMotion:
    """Camera-frame velocity of the agent in m/s; Z is the optical axis."""

    v: tuple[float, float, float]

    def __post_init__(self):
        if not np.all(np.isfinite(self.v)):
            raise ValueError("egomotion must be finite")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.v, dtype=np.float64)


@dataclass(frozen=True)
class EvasionResult:
    """Evasion direction psi (unit length or zero) and its provenance."""

    motion_vec: tuple[float, float, float]
    psi: tuple[float, float, float]
    degenerate: bool
    pixel_count: int


def obstacle_motion_vector(
    flow: FlowField,
    depth: FloatMap,
    t: TtiMap,
    danger_mask: np.ndarray,
    camera: Optional[CameraModel] = None,
) -> tuple[np.ndarray, int]:
    """Mean 3-D motion term over the danger mask: (F_u, F_v, d * tau) per pixel.

    With a camera model the transverse components are lifted to metric m/s
    (u * d / (fx * dt)), matching the radial component's units; without one they
    stay in px/frame.  Returns (vector, contributing pixel count); an empty mask
    yields the zero vector.
    """
    shape = (flow.height, flow.width)
    if (depth.height, depth.width) != shape or t.values.shape != shape:
        raise ShapeMismatchError("flow, depth and tti dimensions must match")
    mask = np.asarray(danger_mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeMismatchError("danger mask dimensions must match the rasters")
    count = int(mask.sum())
    if count == 0:
        return np.zeros(3, dtype=np.float64), 0
    u = flow.u[mask].astype(np.float64)
    v = flow.v[mask].astype(np.float64)
    d = depth.values[mask].astype(np.float64)
    tau = t.values[mask].astype(np.float64)
    if camera is not None:
        u = u * d / (camera.fx * t.dt)
        v = v * d / (camera.fy * t.dt)
    vec = np.array([u.mean(), v.mean(), (d * tau).mean()], dtype=np.float64)
    return vec, count


def evasion_direction(motion_vec, ego: EgoMotion, pixel_count: int = 0) -> EvasionResult:
    """Unit evasion direction psi = normalize(motion_vec x v).

    When the cross product degenerates (parallel or zero vectors) the fallback
    is camera-frame +X projected orthogonal to v, so a head-on obstacle still
    produces a decisive sideways direction; the zero vector is returned only if
    that too degenerates.  pixel_count records how many pixels fed motion_vec.
    """
    m = np.asarray(motion_vec, dtype=np.float64)
    if m.shape != (3,):
        raise ValueError(f"motion vector must be a 3-vector, got shape {m.shape}")
    v = ego.as_array()
    cross = np.cross(m, v)
    norm = float(np.linalg.norm(cross))
    if norm >= _DEGENERATE_CROSS:
        psi = cross / norm
        degenerate = False
    else:
        degenerate = True
        x_axis = np.array([1.0, 0.0, 0.0])
        v_norm = float(np.linalg.norm(v))
        if v_norm < _DEGENERATE_CROSS:
            psi = x_axis
        else:
            vhat = v / v_norm
            proj = x_axis - np.dot(x_axis, vhat) * vhat
            proj_norm = float(np.linalg.norm(proj))
            psi = proj / proj_norm if proj_norm >= _DEGENERATE_CROSS else np.zeros(3)
    return EvasionResult(
        motion_vec=tuple(float(c) for c in m),
        psi=tuple(float(c) for c in psi),
        degenerate=degenerate,
        pixel_count=pixel_count,
    )
