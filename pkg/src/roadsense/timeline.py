"""Time indexes and multi-rate stream alignment.

A TimeIndex is a binary-searchable view over one timestamped stream.
``align_streams`` fuses the three package streams into one row per IMU
sample: interpolated GPS position, a speed estimate, and the nearest
frame reference within tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geo import haversine
from .model import FrameRef, GpsFix, SensorSample

DEFAULT_FRAME_TOL_MS = 50      # half of a 10 fps frame period
DEFAULT_GPS_MAX_GAP_MS = 5000  # bracketing fixes further apart fabricate nothing


class TimeIndex:
    """Immutable index over a stream with strictly increasing timestamps."""

    def __init__(self, items: Sequence):
        ts = np.asarray([item.t for item in items], dtype=np.int64)
        if ts.size > 1:
            bad = np.where(np.diff(ts) <= 0)[0]
            if bad.size:
                i = int(bad[0]) + 1
                kind = "duplicate" if ts[i] == ts[i - 1] else "non-monotonic"
                raise ValueError(
                    f"{kind} timestamp at position {i} (t={int(ts[i])})"
                )
        self._ts = ts
        self._items = list(items)

    def __len__(self) -> int:
        return len(self._items)

    @property
    def timestamps(self) -> np.ndarray:
        return self._ts

    @property
    def items(self) -> list:
        return self._items

    def nearest(self, t: int, tol: int):
        """Item minimizing |item.t - t| if that minimum <= tol, else None.

        Ties break toward the earlier timestamp.
        """
        if tol < 0:
            raise ValueError(f"tol must be >= 0, got {tol}")
        n = self._ts.size
        if n == 0:
            return None
        i = int(np.searchsorted(self._ts, t))
        best = None
        best_dist = None
        if i > 0:
            best = i - 1
            best_dist = abs(t - int(self._ts[i - 1]))
        if i < n:
            d = abs(int(self._ts[i]) - t)
            if best_dist is None or d < best_dist:  # strict: ties keep earlier
                best, best_dist = i, d
        if best_dist is None or best_dist > tol:
            return None
        return self._items[best]

    def range(self, t0: int, t1: int) -> list:
        """All items with t0 <= t <= t1, in time order."""
        if t0 > t1:
            raise ValueError(f"t0 ({t0}) > t1 ({t1})")
        lo = int(np.searchsorted(self._ts, t0, side="left"))
        hi = int(np.searchsorted(self._ts, t1, side="right"))
        return self._items[lo:hi]


def build_index(stream: Sequence) -> TimeIndex:
    return TimeIndex(stream)


def nearest(idx: TimeIndex, t: int, tol: int):
    return idx.nearest(t, tol)


def range_query(idx: TimeIndex, t0: int, t1: int) -> list:
    return idx.range(t0, t1)


def interpolate_position(
    gps: TimeIndex, t: int, max_gap_ms: int = DEFAULT_GPS_MAX_GAP_MS
) -> Optional[tuple[float, float]]:
    """Linearly interpolate (lat, lon) at time *t* between bracketing fixes.

    Returns None outside GPS coverage or across a gap wider than
    *max_gap_ms*. Exact-timestamp hits return that fix regardless of the
    neighboring gaps.
    """
    ts = gps.timestamps
    n = ts.size
    if n == 0:
        return None
    i = int(np.searchsorted(ts, t))
    if i < n and int(ts[i]) == t:
        fix = gps.items[i]
        return (fix.lat, fix.lon)
    if i == 0 or i == n:
        return None
    left, right = gps.items[i - 1], gps.items[i]
    gap = right.t - left.t
    if gap > max_gap_ms:
        return None
    w = (t - left.t) / gap
    return (
        left.lat + w * (right.lat - left.lat),
        left.lon + w * (right.lon - left.lon),
    )


def _interpolate_speed(gps: TimeIndex, t: int, max_gap_ms: int) -> Optional[float]:
    """Interpolate the GPS speed field at *t*; None when either bracketing
    fix lacks a speed or *t* is outside coverage."""
    ts = gps.timestamps
    n = ts.size
    if n == 0:
        return None
    i = int(np.searchsorted(ts, t))
    if i < n and int(ts[i]) == t:
        return gps.items[i].speed_mps
    if i == 0 or i == n:
        return None
    left, right = gps.items[i - 1], gps.items[i]
    if right.t - left.t > max_gap_ms:
        return None
    if left.speed_mps is None or right.speed_mps is None:
        return None
    w = (t - left.t) / (right.t - left.t)
    return left.speed_mps + w * (right.speed_mps - left.speed_mps)


@dataclass(frozen=True)
class AlignedRecord:
    """One fused row: IMU sample + interpolated GPS + nearest frame."""

    t: int
    sample: SensorSample
    position: Optional[tuple[float, float]]  # (lat, lon)
    speed_mps: Optional[float]
    frame: Optional[FrameRef]


def align_streams(
    samples: Sequence[SensorSample],
    gps: Sequence[GpsFix],
    frames: Sequence[FrameRef],
    frame_tol_ms: int = DEFAULT_FRAME_TOL_MS,
    gps_max_gap_ms: int = DEFAULT_GPS_MAX_GAP_MS,
) -> list[AlignedRecord]:
    """Produce one AlignedRecord per IMU sample.

    Speed comes from the GPS speed field when the bracketing fixes carry
    one; otherwise it falls back to a central finite difference of
    interpolated positions over neighboring samples.
    """
    sample_idx = samples if isinstance(samples, TimeIndex) else build_index(samples)
    gps_idx = gps if isinstance(gps, TimeIndex) else build_index(gps)
    frame_idx = frames if isinstance(frames, TimeIndex) else build_index(frames)

    sample_items = sample_idx.items
    positions = [
        interpolate_position(gps_idx, s.t, gps_max_gap_ms) for s in sample_items
    ]
    records = []
    n = len(sample_items)
    for i, s in enumerate(sample_items):
        speed = _interpolate_speed(gps_idx, s.t, gps_max_gap_ms)
        if speed is None:
            speed = _finite_difference_speed(sample_items, positions, i, n)
        records.append(
            AlignedRecord(
                t=s.t,
                sample=s,
                position=positions[i],
                speed_mps=speed,
                frame=frame_idx.nearest(s.t, frame_tol_ms),
            )
        )
    return records


def _finite_difference_speed(samples, positions, i, n) -> Optional[float]:
    # central difference where both neighbors have positions; one-sided at ends
    lo = i - 1 if i > 0 else i
    hi = i + 1 if i < n - 1 else i
    if lo == hi:
        return None
    p0, p1 = positions[lo], positions[hi]
    if p0 is None or p1 is None:
        return None
    dt_s = (samples[hi].t - samples[lo].t) / 1000.0
    if dt_s <= 0:
        return None
    return haversine(p0, p1) / dt_s
