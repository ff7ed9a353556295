"""Shared value types: events, accumulated event maps, dense rasters, camera intrinsics.

Everything downstream (simulator, flow solver, TTI estimators, metrics) trades in
these types.  All containers are immutable after construction; the numpy payloads
are marked read-only so instances can be shared freely across threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "EVENT_DTYPE",
    "Event",
    "EventMap",
    "FlowField",
    "FloatMap",
    "MapSemantics",
    "CameraModel",
    "EventOrderError",
    "EventWindowError",
    "ShapeMismatchError",
    "UndefinedMetricError",
    "as_event_array",
    "make_events",
    "accumulate_events",
    "event_mask",
    "float_map",
    "flow_field",
]

# Binary-compatible with the on-disk event record: t f64, x u16, y u16,
# polarity i8, 3 pad bytes (16-byte stride).
EVENT_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "polarity"],
        "formats": ["<f8", "<u2", "<u2", "i1"],
        "offsets": [0, 8, 10, 12],
        "itemsize": 16,
    }
)


class EventOrderError(ValueError):
    """Event stream is not sorted by timestamp."""


class EventWindowError(ValueError):
    """Events fall outside the accumulation window, or the window is degenerate."""


class ShapeMismatchError(ValueError):
    """Raster dimensions disagree."""


class UndefinedMetricError(ValueError):
    """A metric was requested over an empty support set (or a zero vector)."""


class MapSemantics(IntEnum):
    """Channel meaning of a FloatMap; values match the on-disk semantics codes."""

    INTENSITY = 0
    DEPTH_M = 1
    INV_TTI_S = 2
    CLASS_ID = 3
    FLOW_U = 4
    FLOW_V = 5


def _frozen(values, dtype) -> np.ndarray:
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Event:
    """A single polarity change: timestamp (s), pixel column/row, sign in {+1, -1}."""

    t: float
    x: int
    y: int
    polarity: int

    def __post_init__(self):
        if not np.isfinite(self.t) or self.t < 0:
            raise ValueError(f"event timestamp must be finite and >= 0, got {self.t}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"event coordinates must be >= 0, got ({self.x}, {self.y})")
        if self.polarity not in (1, -1):
            raise ValueError(f"event polarity must be +1 or -1, got {self.polarity}")


def make_events(t, x, y, polarity) -> np.ndarray:
    """Pack parallel component sequences into a structured event array."""
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros(t.shape[0], dtype=EVENT_DTYPE)
    out["t"] = t
    out["x"] = np.asarray(x, dtype=np.uint16)
    out["y"] = np.asarray(y, dtype=np.uint16)
    out["polarity"] = np.asarray(polarity, dtype=np.int8)
    return out


def as_event_array(events: Union[np.ndarray, Iterable[Event]]) -> np.ndarray:
    """Coerce an iterable of Event (or a structured array) to EVENT_DTYPE."""
    if isinstance(events, np.ndarray):
        if events.dtype != EVENT_DTYPE:
            missing = {"t", "x", "y", "polarity"} - set(events.dtype.names or ())
            if missing:
                raise TypeError(f"event array lacks fields {sorted(missing)}")
            out = np.zeros(events.shape[0], dtype=EVENT_DTYPE)
            for name in ("t", "x", "y", "polarity"):
                out[name] = events[name]
            return out
        return events
    seq = list(events)
    out = np.zeros(len(seq), dtype=EVENT_DTYPE)
    for i, ev in enumerate(seq):
        out[i] = (ev.t, ev.x, ev.y, ev.polarity)
    return out


@dataclass(frozen=True, eq=False)
class EventMap:
    """4-channel accumulation of events over a time window.

    pos_count / neg_count hold per-pixel event counts; pos_time / neg_time hold
    the most recent event time per pixel, normalized to [0, 1] within the window
    (0 doubles as the "no event" sentinel).
    """

    width: int
    height: int
    t_start: float
    t_end: float
    pos_count: np.ndarray
    neg_count: np.ndarray
    pos_time: np.ndarray
    neg_time: np.ndarray

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise EventWindowError(f"window [{self.t_start}, {self.t_end}) is empty")
        for name in ("pos_count", "neg_count", "pos_time", "neg_time"):
            arr = getattr(self, name)
            if arr.shape != (self.height, self.width):
                raise ShapeMismatchError(
                    f"{name} has shape {arr.shape}, expected {(self.height, self.width)}"
                )

    @property
    def total_events(self) -> int:
        return int(self.pos_count.sum()) + int(self.neg_count.sum())


def accumulate_events(
    events: Union[np.ndarray, Iterable[Event]],
    window: tuple[float, float],
    width: int,
    height: int,
) -> EventMap:
    """Accumulate a sorted event stream into the 4-channel representation.

    Counts are summed per pixel and polarity; the timestamp channels keep the
    most recent event per pixel, normalized as (t - t0) / (t1 - t0).
    """
    t0, t1 = float(window[0]), float(window[1])
    if t1 <= t0:
        raise EventWindowError(f"window [{t0}, {t1}) is empty")
    arr = as_event_array(events)
    t = arr["t"]
    if t.size and np.any(np.diff(t) < 0):
        raise EventOrderError("events must be sorted by timestamp")
    if t.size and (t[0] < t0 or t[-1] >= t1):
        raise EventWindowError(
            f"events span [{t[0] if t.size else t0}, {t[-1] if t.size else t0}] "
            f"outside window [{t0}, {t1})"
        )
    x = arr["x"].astype(np.intp)
    y = arr["y"].astype(np.intp)
    if t.size and (x.max() >= width or y.max() >= height):
        raise ValueError("event coordinates exceed raster dimensions")

    shape = (height, width)
    pos_count = np.zeros(shape, dtype=np.uint32)
    neg_count = np.zeros(shape, dtype=np.uint32)
    pos_time = np.zeros(shape, dtype=np.float32)
    neg_time = np.zeros(shape, dtype=np.float32)
    tn = ((t - t0) / (t1 - t0)).astype(np.float32)
    pos = arr["polarity"] > 0
    np.add.at(pos_count, (y[pos], x[pos]), 1)
    np.add.at(neg_count, (y[~pos], x[~pos]), 1)
    # Sorted input means max == most recent; maximum.at is order-independent.
    np.maximum.at(pos_time, (y[pos], x[pos]), tn[pos])
    np.maximum.at(neg_time, (y[~pos], x[~pos]), tn[~pos])

    return EventMap(
        width=width,
        height=height,
        t_start=t0,
        t_end=t1,
        pos_count=_frozen(pos_count, np.uint32),
        neg_count=_frozen(neg_count, np.uint32),
        pos_time=_frozen(pos_time, np.float32),
        neg_time=_frozen(neg_time, np.float32),
    )


def event_mask(em: EventMap) -> np.ndarray:
    """Binary raster: 1 where at least one event of either polarity occurred."""
    return (em.pos_count.astype(np.int64) + em.neg_count.astype(np.int64)) > 0


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense 2-channel displacement field in pixels per frame interval."""

    width: int
    height: int
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        for name in ("u", "v"):
            arr = getattr(self, name)
            if arr.shape != (self.height, self.width):
                raise ShapeMismatchError(
                    f"{name} has shape {arr.shape}, expected {(self.height, self.width)}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"flow channel {name} contains non-finite values")


def flow_field(u, v) -> FlowField:
    """Build a FlowField from two (H, W) arrays."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != v.shape or u.ndim != 2:
        raise ShapeMismatchError(f"u/v shapes {u.shape} vs {v.shape} must match and be 2-D")
    h, w = u.shape
    return FlowField(width=w, height=h, u=_frozen(u, np.float32), v=_frozen(v, np.float32))


@dataclass(frozen=True, eq=False)
class FloatMap:
    """Dense scalar raster tagged with its channel meaning."""

    width: int
    height: int
    semantics: MapSemantics
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.height, self.width):
            raise ShapeMismatchError(
                f"values shape {self.values.shape} != {(self.height, self.width)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("map contains non-finite values")
        if self.semantics in (MapSemantics.DEPTH_M, MapSemantics.INV_TTI_S):
            if np.any(self.values < 0):
                raise ValueError(f"{self.semantics.name} map must be non-negative")


def float_map(values, semantics: MapSemantics) -> FloatMap:
    """Build a FloatMap from an (H, W) array."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D raster, got shape {values.shape}")
    h, w = values.shape
    return FloatMap(
        width=w,
        height=h,
        semantics=MapSemantics(semantics),
        values=_frozen(values, np.float32),
    )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics; pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
