"""Synthetic sequence generator: a camera on a floor-based trajectory inside a
closed textured room with flying sphere obstacles.

Geometry is analytic (axis-aligned box + spheres, ray-cast per pixel), so
depth, optical flow and semantic maps are exact.  Events are emulated from the
rendered intensity stream by log-intensity threshold crossings with linear
interpolation of crossing times between frames; this is a frame-based stand-in
for a true adaptive-rate event renderer.

World frame: Z up, floor at z = 0, room spanning [-hx, hx] x [-hy, hy] x
[0, 2*hz].  The camera looks along its yaw heading in the X-Y plane; camera
axes are x right, y down, z forward (optical axis).  Flat-coloured (textureless)
surfaces are first-class: they render constant intensity and generate no
events, which is the motivating failure case for event-only perception.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .tti import TtiMap, ground_truth_inverse_tti
from .types import (
    CameraModel,
    FloatMap,
    FlowField,
    MapSemantics,
    ShapeMismatchError,
    float_map,
    flow_field,
    make_events,
)

__all__ = [
    "TextureSpec",
    "SphereObstacle",
    "TrajectorySpec",
    "SceneConfig",
    "Frame",
    "SequenceResult",
    "PoseError",
    "default_camera",
    "render_frame",
    "generate_events",
    "simulate_sequence",
    "LOG_EPS",
]

LOG_EPS = 1e-3  # guards log(0) in the event emulator
_AMBIENT = 0.25  # sphere shading floor so unlit sides stay visible

CLASS_STATIC = 0
CLASS_FLOOR = 1
CLASS_FLYING = 2


class PoseError(ValueError):
    """Camera pose left the room interior."""


def default_camera() -> CameraModel:
    return CameraModel(fx=100.0, fy=100.0, cx=31.5, cy=31.5, width=64, height=64)


@dataclass(frozen=True)
class TextureSpec:
    """Procedural surface colour.

    'flat' is a constant base value; 'checker' is a band-limited checkerboard
    (product of sines with the given period in metres), which keeps point
    sampling alias-free and gives the flow solver smooth gradients.
    """

    kind: str = "checker"
    amplitude: float = 0.6
    period_m: float = 0.5
    base: float = 0.5

    def __post_init__(self):
        if self.kind not in ("flat", "checker"):
            raise ValueError(f"texture kind must be 'flat' or 'checker', got '{self.kind}'")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError("texture amplitude must be in [0, 1]")
        if self.period_m <= 0:
            raise ValueError("texture period must be positive")

    def sample(self, su: np.ndarray, sv: np.ndarray) -> np.ndarray:
        if self.kind == "flat" or self.amplitude == 0.0:
            return np.full(su.shape, self.base, dtype=np.float64)
        w = 2.0 * math.pi / self.period_m
        return self.base + 0.5 * self.amplitude * np.sin(w * su) * np.sin(w * sv)


@dataclass(frozen=True)
class SphereObstacle:
    """A rigid sphere translating at constant velocity."""

    radius: float
    start: tuple[float, float, float]
    velocity: tuple[float, float, float]
    class_id: int = CLASS_FLYING
    albedo: float = 0.9

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("obstacle radius must be positive")

    def center(self, t: float) -> np.ndarray:
        return np.asarray(self.start, dtype=np.float64) + t * np.asarray(
            self.velocity, dtype=np.float64
        )


@dataclass(frozen=True)
class TrajectorySpec:
    """Floor-plane waypoints (x, y, yaw_deg) visited in order.

    Translation segments run at `speed` m/s with yaw interpolated across the
    segment; zero-length segments with a yaw change become turns in place at
    `yaw_rate_deg` deg/s.  After the last waypoint the camera holds pose.
    """

    waypoints: tuple[tuple[float, float, float], ...] = ((-1.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    speed: float = 0.5
    yaw_rate_deg: float = 45.0


class _Trajectory:
    """Compiled piecewise-linear pose timeline."""

    def __init__(self, spec: TrajectorySpec):
        if not spec.waypoints:
            raise ValueError("trajectory needs at least one waypoint")
        self.knot_times = [0.0]
        self.knots = [np.array(spec.waypoints[0], dtype=np.float64)]
        for wp in spec.waypoints[1:]:
            wp = np.array(wp, dtype=np.float64)
            prev = self.knots[-1]
            dist = math.hypot(wp[0] - prev[0], wp[1] - prev[1])
            dyaw = abs(wp[2] - prev[2])
            if dist > 1e-12:
                seg_t = dist / spec.speed
            elif dyaw > 1e-12:
                seg_t = dyaw / spec.yaw_rate_deg
            else:
                continue
            self.knot_times.append(self.knot_times[-1] + seg_t)
            self.knots.append(wp)

    def pose(self, t: float) -> tuple[np.ndarray, float]:
        """Position (x, y) and yaw in radians at time t (clamped to the timeline)."""
        times, knots = self.knot_times, self.knots
        if t <= times[0] or len(knots) == 1:
            wp = knots[0]
        elif t >= times[-1]:
            wp = knots[-1]
        else:
            j = int(np.searchsorted(times, t, side="right")) - 1
            f = (t - times[j]) / (times[j + 1] - times[j])
            wp = knots[j] + f * (knots[j + 1] - knots[j])
        return wp[:2].copy(), math.radians(wp[2])


def _camera_basis(yaw: float) -> np.ndarray:
    """World-frame camera axes as columns [right, down, forward]."""
    c, s = math.cos(yaw), math.sin(yaw)
    right = (s, -c, 0.0)
    down = (0.0, 0.0, -1.0)
    forward = (c, s, 0.0)
    return np.array([right, down, forward], dtype=np.float64).T


@dataclass(frozen=True)
class SceneConfig:
    """Full description of one synthetic sequence."""

    half_extents: tuple[float, float, float] = (3.0, 3.0, 1.5)
    wall_texture: TextureSpec = field(default_factory=TextureSpec)
    floor_texture: TextureSpec = field(default_factory=lambda: TextureSpec(amplitude=0.5))
    ceiling_texture: TextureSpec = field(default_factory=lambda: TextureSpec(kind="flat", amplitude=0.0))
    obstacles: tuple[SphereObstacle, ...] = ()
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    camera: CameraModel = field(default_factory=default_camera)
    camera_height: float = 1.5
    frame_rate: float = 20.0
    duration: float = 1.0
    contrast_threshold: float = 0.15
    light_dir: tuple[float, float, float] = (0.3, -0.5, 0.8)
    rng_seed: int = 0
    random_obstacles: int = 0

    def __post_init__(self):
        if any(h <= 0 for h in self.half_extents):
            raise ValueError("room half-extents must be positive")
        if self.frame_rate <= 0 or self.duration <= 0:
            raise ValueError("frame_rate and duration must be positive")
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if not 0 < self.camera_height < 2 * self.half_extents[2]:
            raise ValueError("camera_height must lie between floor and ceiling")
        if self.random_obstacles < 0:
            raise ValueError("random_obstacles must be >= 0")

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    def frame_times(self) -> np.ndarray:
        n = max(2, int(round(self.duration * self.frame_rate)))
        return np.arange(n, dtype=np.float64) / self.frame_rate

    def realized_obstacles(self) -> tuple[SphereObstacle, ...]:
        """Configured obstacles plus `random_obstacles` seeded random spheres."""
        if self.random_obstacles == 0:
            return self.obstacles
        rng = np.random.default_rng(self.rng_seed)
        hx, hy, hz = self.half_extents
        extra = []
        for _ in range(self.random_obstacles):
            radius = rng.uniform(0.1, 0.35)
            start = (
                rng.uniform(-hx + radius + 0.2, hx - radius - 0.2),
                rng.uniform(-hy + radius + 0.2, hy - radius - 0.2),
                rng.uniform(radius + 0.1, 2 * hz - radius - 0.1),
            )
            speed = rng.uniform(0.5, 3.0)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            extra.append(
                SphereObstacle(
                    radius=radius,
                    start=start,
                    velocity=tuple(speed * direction),
                    class_id=CLASS_FLYING,
                    albedo=rng.uniform(0.5, 1.0),
                )
            )
        return self.obstacles + tuple(extra)


@dataclass(frozen=True, eq=False)
class Frame:
    """One simulator time slice.

    flow_fwd maps pixels at t to t+dt, flow_bwd to t-dt; they are None at the
    ends of the sequence where the neighbour frame does not exist.
    """

    t: float
    intensity: FloatMap
    depth: FloatMap
    class_map: FloatMap
    flow_fwd: Optional[FlowField]
    flow_bwd: Optional[FlowField]
    position: tuple[float, float, float]
    yaw: float


class _Raycast:
    """Per-pixel hit result for one camera pose."""

    __slots__ = ("depth", "points", "obj", "normals", "velocity")

    def __init__(self, depth, points, obj, normals, velocity):
        self.depth = depth  # camera-frame Z (ray parameter), (H, W)
        self.points = points  # world hit points, (H, W, 3)
        self.obj = obj  # 0..5 room faces, 6+i for obstacle i
        self.normals = normals  # world normals for obstacle pixels (else 0)
        self.velocity = velocity  # material velocity, (H, W, 3)


def _cast(scene: SceneConfig, obstacles, origin: np.ndarray, yaw: float, t: float) -> _Raycast:
    cam = scene.camera
    hx, hy, hz = scene.half_extents
    rot = _camera_basis(yaw)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    dirs_cam = np.stack(
        [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1
    )
    dirs = dirs_cam @ rot.T  # world directions; ray parameter equals camera-frame Z

    tiny = 1e-12
    best_t = np.full(xs.shape, np.inf)
    best_obj = np.full(xs.shape, -1, dtype=np.int32)
    bounds = ((-hx, hx), (-hy, hy), (0.0, 2 * hz))
    for axis in range(3):
        d = dirs[..., axis]
        lo, hi = bounds[axis]
        bound = np.where(d > 0, hi, lo)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_plane = np.where(np.abs(d) > tiny, (bound - origin[axis]) / d, np.inf)
        face = axis * 2 + (d > 0).astype(np.int32)  # {-x:0, +x:1, -y:2, +y:3, floor:4, ceiling:5}
        closer = t_plane < best_t
        best_t = np.where(closer, t_plane, best_t)
        best_obj = np.where(closer, face, best_obj)

    for i, sphere in enumerate(obstacles):
        center = sphere.center(t)
        oc = origin - center
        a = np.sum(dirs * dirs, axis=-1)
        b = 2.0 * (dirs @ oc)
        c = float(oc @ oc) - sphere.radius**2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t1 = (-b - sq) / (2.0 * a)
        t2 = (-b + sq) / (2.0 * a)
        t_sph = np.where(t1 > tiny, t1, np.where(t2 > tiny, t2, np.inf))
        t_sph = np.where(hit, t_sph, np.inf)
        closer = t_sph < best_t
        best_t = np.where(closer, t_sph, best_t)
        best_obj = np.where(closer, 6 + i, best_obj)

    points = origin + best_t[..., None] * dirs
    normals = np.zeros_like(points)
    velocity = np.zeros_like(points)
    for i, sphere in enumerate(obstacles):
        sel = best_obj == 6 + i
        if np.any(sel):
            normals[sel] = (points[sel] - sphere.center(t)) / sphere.radius
            velocity[sel] = np.asarray(sphere.velocity, dtype=np.float64)
    return _Raycast(depth=best_t, points=points, obj=best_obj, normals=normals, velocity=velocity)


def _shade(scene: SceneConfig, obstacles, cast: _Raycast) -> np.ndarray:
    p = cast.points
    out = np.zeros(cast.depth.shape, dtype=np.float64)
    face_planes = {  # face id -> in-plane world coordinates
        0: (1, 2),
        1: (1, 2),
        2: (0, 2),
        3: (0, 2),
        4: (0, 1),
        5: (0, 1),
    }
    for face, tex in ((0, scene.wall_texture), (1, scene.wall_texture),
                      (2, scene.wall_texture), (3, scene.wall_texture),
                      (4, scene.floor_texture), (5, scene.ceiling_texture)):
        sel = cast.obj == face
        if np.any(sel):
            au, av = face_planes[face]
            out[sel] = tex.sample(p[sel][:, au], p[sel][:, av])
    light = np.asarray(scene.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    for i, sphere in enumerate(obstacles):
        sel = cast.obj == 6 + i
        if np.any(sel):
            lambert = np.maximum(cast.normals[sel] @ light, 0.0)
            out[sel] = sphere.albedo * (_AMBIENT + (1.0 - _AMBIENT) * lambert)
    return np.clip(out, 0.0, 1.0)


def _project(cam: CameraModel, rot: np.ndarray, origin: np.ndarray, points: np.ndarray):
    """World points -> pixel coordinates under a camera pose."""
    rel = (points - origin) @ rot  # camera-frame coordinates
    z = np.maximum(rel[..., 2], 1e-9)
    u = cam.fx * rel[..., 0] / z + cam.cx
    v = cam.fy * rel[..., 1] / z + cam.cy
    return u, v


def _flow_to(scene: SceneConfig, cast: _Raycast, t_from: float, t_to: float,
             traj: _Trajectory) -> FlowField:
    cam = scene.camera
    pos2, yaw2 = traj.pose(t_to)
    origin2 = np.array([pos2[0], pos2[1], scene.camera_height])
    rot2 = _camera_basis(yaw2)
    moved = cast.points + cast.velocity * (t_to - t_from)
    u2, v2 = _project(cam, rot2, origin2, moved)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    return flow_field(u2 - xs, v2 - ys)


def render_frame(scene: SceneConfig, t: float) -> Frame:
    """Render the exact frame at time t: intensity, depth (camera-frame Z),
    semantic classes and analytic forward/backward flow."""
    if not 0.0 <= t <= scene.duration + 1e-9:
        raise ValueError(f"t={t} outside [0, {scene.duration}]")
    traj = _Trajectory(scene.trajectory)
    obstacles = scene.realized_obstacles()
    pos, yaw = traj.pose(t)
    hx, hy, hz = scene.half_extents
    if not (-hx < pos[0] < hx and -hy < pos[1] < hy and 0 < scene.camera_height < 2 * hz):
        raise PoseError(f"camera at ({pos[0]:.3f}, {pos[1]:.3f}) outside room interior")
    origin = np.array([pos[0], pos[1], scene.camera_height])

    cast = _cast(scene, obstacles, origin, yaw, t)
    intensity = _shade(scene, obstacles, cast)
    class_values = np.zeros(cast.depth.shape, dtype=np.float64)
    class_values[cast.obj == 4] = CLASS_FLOOR
    for i, sphere in enumerate(obstacles):
        class_values[cast.obj == 6 + i] = sphere.class_id

    times = scene.frame_times()
    dt = scene.dt
    t_last = float(times[-1])
    flow_fwd = _flow_to(scene, cast, t, t + dt, traj) if t + dt <= t_last + 1e-9 else None
    flow_bwd = _flow_to(scene, cast, t, t - dt, traj) if t - dt >= -1e-9 else None

    return Frame(
        t=float(t),
        intensity=float_map(intensity, MapSemantics.INTENSITY),
        depth=float_map(cast.depth, MapSemantics.DEPTH_M),
        class_map=float_map(class_values, MapSemantics.CLASS_ID),
        flow_fwd=flow_fwd,
        flow_bwd=flow_bwd,
        position=(float(origin[0]), float(origin[1]), float(origin[2])),
        yaw=float(yaw),
    )


def generate_events(
    timestamps: Sequence[float],
    intensities: Sequence[np.ndarray],
    contrast_threshold: float,
) -> np.ndarray:
    """Emulate an event camera from an intensity sequence.

    Per pixel, an event fires each time log(I + LOG_EPS) moves a full contrast
    threshold away from the running reference level, which then advances to the
    crossed level; crossing times are linearly interpolated between frames.
    Returns a structured event array sorted by (t, y, x, polarity).
    """
    if contrast_threshold <= 0:
        raise ValueError("contrast threshold must be positive")
    if len(timestamps) != len(intensities) or len(intensities) < 2:
        raise ValueError("need >= 2 frames with matching timestamps")
    frames = [np.asarray(img.values if isinstance(img, FloatMap) else img, dtype=np.float64)
              for img in intensities]
    shape = frames[0].shape
    for k, img in enumerate(frames):
        if img.shape != shape:
            raise ShapeMismatchError(f"frame {k} has shape {img.shape}, expected {shape}")
    times = np.asarray(timestamps, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("timestamps must be strictly increasing")

    c = float(contrast_threshold)
    logs = [np.log(img + LOG_EPS) for img in frames]
    l_ref = logs[0].copy()
    parts: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    for k in range(1, len(frames)):
        l_prev, l_curr = logs[k - 1], logs[k]
        delta = l_curr - l_ref
        count = np.floor(np.abs(delta) / c).astype(np.int64)
        idx = np.flatnonzero(count)
        if idx.size == 0:
            continue
        reps = count.flat[idx]
        sign = np.sign(delta.flat[idx]).astype(np.int64)
        total = int(reps.sum())
        stops = np.cumsum(reps)
        ordinal = np.arange(1, total + 1) - np.repeat(stops - reps, reps)
        pix = np.repeat(idx, reps)
        sgn = np.repeat(sign, reps)
        level = l_ref.flat[pix] + sgn * c * ordinal
        frac = (level - l_prev.flat[pix]) / (l_curr.flat[pix] - l_prev.flat[pix])
        np.clip(frac, 0.0, 1.0, out=frac)
        t_cross = times[k - 1] + (times[k] - times[k - 1]) * frac
        ys, xs = np.unravel_index(pix, shape)
        parts.append((t_cross, xs, ys, sgn))
        l_ref.flat[idx] += sign * c * reps

    if not parts:
        return make_events([], [], [], [])
    t_all = np.concatenate([p[0] for p in parts])
    x_all = np.concatenate([p[1] for p in parts])
    y_all = np.concatenate([p[2] for p in parts])
    p_all = np.concatenate([p[3] for p in parts])
    order = np.lexsort((p_all, x_all, y_all, t_all))
    return make_events(t_all[order], x_all[order], y_all[order], p_all[order])


@dataclass(frozen=True, eq=False)
class SequenceResult:
    """A rendered sequence with its event stream and ground-truth inverse TTI.

    event_windows[k] holds events in [t_k, t_{k+1}); tti_gt[k] is the map for
    frame k+1, computed from (depth_k, depth_{k+1}, flow_bwd_{k+1}).
    """

    scene: SceneConfig
    frames: tuple[Frame, ...]
    events: np.ndarray
    event_windows: tuple[np.ndarray, ...]
    tti_gt: tuple[TtiMap, ...]


def simulate_sequence(scene: SceneConfig, workers: int = 1) -> SequenceResult:
    """Render all frames, emulate events, and derive the ground-truth inverse
    TTI stream.  Identical configs (and seeds) produce identical results for
    any worker count."""
    times = scene.frame_times()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = tuple(pool.map(lambda t: render_frame(scene, t), times))
    else:
        frames = tuple(render_frame(scene, t) for t in times)

    events = generate_events(
        times, [f.intensity for f in frames], scene.contrast_threshold
    )
    windows = []
    t_ev = events["t"]
    for k in range(len(times) - 1):
        lo = np.searchsorted(t_ev, times[k], side="left")
        hi = np.searchsorted(t_ev, times[k + 1], side="left")
        windows.append(events[lo:hi].copy())

    dt = scene.dt
    tti_maps = []
    for k in range(1, len(frames)):
        tti_maps.append(
            ground_truth_inverse_tti(
                frames[k - 1].depth, frames[k].depth, frames[k].flow_bwd, dt
            )
        )
    return SequenceResult(
        scene=scene,
        frames=frames,
        events=events,
        event_windows=tuple(windows),
        tti_gt=tuple(tti_maps),
    )
