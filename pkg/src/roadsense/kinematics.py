"""IMU signal analysis: windowed RMS roughness, per-axis spike detection,
and event classification from the axis pattern.

Axis convention (device mounted on the windshield): z is perpendicular to
the road plane, x lateral, y longitudinal. The classification rule keys on
which axes spike together: vertical participation means a road defect
(pothole); lateral/longitudinal-only transients mean a steering event
(lane change or curve); quiet stretches are calm.

Spike scores are robust z-scores, (value - median) / (1.4826 * MAD), over
a centered rolling window: the median/MAD baseline is not corrupted by the
spikes themselves the way mean/stddev would be. A window whose MAD is zero
is a constant stretch; samples equal to the median score 0 there, while a
sample deviating from an otherwise-constant window scores infinite (a
clean impulse on a noiseless channel is still a spike).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

MAD_SCALE = 1.4826  # makes MAD consistent with stddev for Gaussian noise

DEFAULT_WINDOW_MS = 1000
DEFAULT_HOP_MS = 500
DEFAULT_SPIKE_K = 3.0
DEFAULT_MERGE_GAP_MS = 300
DEFAULT_MIN_RUN = 2          # consecutive supra-threshold samples per axis
DEFAULT_SEGMENT_LEN_M = 160.9  # 0.1 mile, matching mile-log conventions

ACCEL_CHANNELS = {"x": "ax", "y": "ay", "z": "az"}


def rms(values: Sequence[float]) -> float:
    """sqrt(mean of squares). Empty input is an error."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("rms of empty input is undefined")
    return float(np.sqrt(np.mean(v * v)))


@dataclass(frozen=True)
class RmsPoint:
    t_center: int
    rms: float


@dataclass(frozen=True)
class RmsSeries:
    window_ms: int
    hop_ms: int
    points: tuple[RmsPoint, ...]


def _channel(samples: Sequence, axis: str) -> np.ndarray:
    attr = ACCEL_CHANNELS.get(axis, axis)
    if attr not in ("ax", "ay", "az"):
        raise ValueError(f"unknown axis {axis!r}; expected x, y or z")
    return np.asarray([getattr(s, attr) for s in samples], dtype=float)


def sliding_rms(
    samples: Sequence,
    axis: str = "z",
    window_ms: int = DEFAULT_WINDOW_MS,
    hop_ms: int = DEFAULT_HOP_MS,
    detrend: bool = True,
) -> RmsSeries:
    """Windowed RMS of one acceleration channel.

    Windows are [start, start + window_ms) anchored at the first sample,
    stepping by hop_ms. With ``detrend`` the window mean is removed first
    (suppresses gravity and mounting bias). Windows with fewer than 2
    samples are skipped.
    """
    if window_ms <= 0 or hop_ms <= 0:
        raise ValueError("window_ms and hop_ms must be > 0")
    if len(samples) == 0:
        return RmsSeries(window_ms, hop_ms, ())
    ts = np.asarray([s.t for s in samples], dtype=np.int64)
    x = _channel(samples, axis)
    points = []
    start = int(ts[0])
    last = int(ts[-1])
    while start <= last:
        lo = int(np.searchsorted(ts, start, side="left"))
        hi = int(np.searchsorted(ts, start + window_ms, side="left"))
        if hi - lo >= 2:
            w = x[lo:hi]
            if detrend:
                w = w - w.mean()
            points.append(RmsPoint(t_center=start + window_ms // 2, rms=rms(w)))
        start += hop_ms
    return RmsSeries(window_ms, hop_ms, tuple(points))


@dataclass(frozen=True)
class SpikeEvent:
    """A merged excursion: the axes that spiked and the peak robust
    z-score per axis."""

    t_start: int
    t_end: int
    axes: frozenset[str]
    peak_score: dict

    def __post_init__(self):
        if self.t_end < self.t_start:
            raise ValidationError("t_end must be >= t_start", field="t_end")
        if not self.axes:
            raise ValidationError("axes must be nonempty", field="axes")


def robust_scores(
    samples: Sequence,
    axis: str,
    window_ms: int = DEFAULT_WINDOW_MS,
    scale_floor: float = 0.0,
) -> np.ndarray:
    """Per-sample robust z-score of one channel against its centered
    rolling window of width window_ms.

    ``scale_floor`` bounds the denominator from below; 0 keeps the pure
    per-window statistic.
    """
    ts = np.asarray([s.t for s in samples], dtype=np.int64)
    x = _channel(samples, axis)
    n = x.size
    if n == 0:
        return np.zeros(0)
    half = window_ms / 2.0
    lo = np.searchsorted(ts, ts - half, side="left")
    hi = np.searchsorted(ts, ts + half, side="right")
    scores = np.zeros(n)
    for i in range(n):
        w = x[lo[i]:hi[i]]
        med = np.median(w)
        scale = max(MAD_SCALE * np.median(np.abs(w - med)), scale_floor)
        dev = x[i] - med
        if scale == 0.0:
            scores[i] = 0.0 if dev == 0.0 else np.copysign(np.inf, dev)
        else:
            scores[i] = dev / scale
    return scores


def _global_scale(samples: Sequence, axis: str) -> float:
    """Whole-stream robust scale of one channel (MAD about the median)."""
    x = _channel(samples, axis)
    if x.size == 0:
        return 0.0
    return float(MAD_SCALE * np.median(np.abs(x - np.median(x))))


def _runs_at_least(mask: np.ndarray, min_run: int) -> list[tuple[int, int]]:
    """(start, end) index pairs (inclusive) of True runs of length >= min_run."""
    runs = []
    i = 0
    n = mask.size
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            if j - i + 1 >= min_run:
                runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def detect_axis_spikes(
    samples: Sequence,
    k: float = DEFAULT_SPIKE_K,
    window_ms: int = DEFAULT_WINDOW_MS,
    merge_gap_ms: int = DEFAULT_MERGE_GAP_MS,
    min_run: int = DEFAULT_MIN_RUN,
) -> list[SpikeEvent]:
    """Find spike events across the three acceleration axes.

    Per axis, samples with |robust z-score| >= k lasting at least
    ``min_run`` consecutive samples form an excursion (the run-length
    floor debounces single-sample noise exceedances). Excursions that
    overlap, or sit closer than merge_gap_ms, coalesce into one event
    whose axes set is the union.

    Scoring floors each window's scale at the whole-stream robust scale:
    a one-second window holds only ~30 samples, so its MAD wobbles enough
    to dip the effective threshold and admit noise. The floor is zero on
    constant streams, so clean impulses still score inf.
    """
    if k <= 0:
        raise ValueError(f"k must be > 0, got {k}")
    if len(samples) == 0:
        return []
    ts = np.asarray([s.t for s in samples], dtype=np.int64)

    excursions = []  # (t_start, t_end, axis, peak)
    for axis in ("x", "y", "z"):
        scores = robust_scores(
            samples, axis, window_ms, scale_floor=_global_scale(samples, axis)
        )
        mask = np.abs(scores) >= k
        for i, j in _runs_at_least(mask, min_run):
            peak = float(np.max(np.abs(scores[i : j + 1])))
            excursions.append((int(ts[i]), int(ts[j]), axis, peak))

    if not excursions:
        return []
    excursions.sort(key=lambda e: (e[0], e[1]))

    events: list[SpikeEvent] = []
    cur_start, cur_end, axis0, peak0 = excursions[0]
    cur_axes = {axis0: peak0}
    for t0, t1, axis, peak in excursions[1:]:
        if t0 <= cur_end + merge_gap_ms:
            cur_end = max(cur_end, t1)
            cur_axes[axis] = max(cur_axes.get(axis, 0.0), peak)
        else:
            events.append(
                SpikeEvent(cur_start, cur_end, frozenset(cur_axes), dict(cur_axes))
            )
            cur_start, cur_end = t0, t1
            cur_axes = {axis: peak}
    events.append(SpikeEvent(cur_start, cur_end, frozenset(cur_axes), dict(cur_axes)))
    return events


class EventKind(str, Enum):
    POTHOLE = "pothole"
    STEERING = "steering_event"
    CALM = "calm"


@dataclass(frozen=True)
class DriveEvent:
    kind: EventKind
    t_start: int
    t_end: int
    source: Optional[SpikeEvent] = None


def classify_spike(spike: SpikeEvent) -> EventKind:
    """Vertical participation means pothole; lateral/longitudinal-only
    means a steering event (lane change or curve)."""
    if "z" in spike.axes:
        return EventKind.POTHOLE
    return EventKind.STEERING


def classify_events(
    spikes: Sequence[SpikeEvent],
    t_start: Optional[int] = None,
    t_end: Optional[int] = None,
) -> list[DriveEvent]:
    """Map spike events to drive events and fill the gaps with calm
    intervals. Optional stream bounds add leading/trailing calm."""
    ordered = sorted(spikes, key=lambda s: (s.t_start, s.t_end))
    events: list[DriveEvent] = []
    cursor = t_start
    for s in ordered:
        if cursor is not None and s.t_start > cursor:
            events.append(DriveEvent(EventKind.CALM, cursor, s.t_start))
        events.append(DriveEvent(classify_spike(s), s.t_start, s.t_end, source=s))
        cursor = s.t_end if cursor is None else max(cursor, s.t_end)
    if t_end is not None and (cursor is None or t_end > cursor):
        events.append(DriveEvent(EventKind.CALM, cursor if cursor is not None else t_end, t_end))
    return events


@dataclass(frozen=True)
class SegmentReport:
    """Per-road-segment roughness: RMS of detrended vertical acceleration,
    mean speed, sample count, and the joined reference IRI when known."""

    chainage_start_m: float
    chainage_end_m: float
    rms: float
    mean_speed_mps: Optional[float]
    n_samples: int
    reference_iri: Optional[float] = None

    def __post_init__(self):
        if not self.chainage_end_m > self.chainage_start_m:
            raise ValidationError(
                "chainage_end_m must exceed chainage_start_m", field="chainage_end_m"
            )
        if self.n_samples < 0:
            raise ValidationError("n_samples must be >= 0", field="n_samples")

    def with_reference_iri(self, iri: Optional[float]) -> "SegmentReport":
        return replace(self, reference_iri=iri)


def segment_roughness(
    aligned: Sequence,
    chainage: Sequence[float],
    segment_len_m: float = DEFAULT_SEGMENT_LEN_M,
) -> list[SegmentReport]:
    """Partition records by chainage into fixed [i*L, (i+1)*L) cells and
    report per-cell RMS of detrended vertical acceleration plus mean speed.

    Cells up to the last occupied one are all emitted, empty ones with
    n_samples = 0.
    """
    if segment_len_m <= 0:
        raise ValueError(f"segment_len_m must be > 0, got {segment_len_m}")
    if len(aligned) != len(chainage):
        raise ValueError("aligned and chainage must be the same length")
    if len(aligned) == 0:
        return []
    c = np.asarray(chainage, dtype=float)
    if np.any(np.diff(c) < 0):
        raise ValueError("chainage must be nondecreasing")
    az = np.asarray([r.sample.az for r in aligned], dtype=float)
    speeds = [r.speed_mps for r in aligned]

    n_cells = int(np.floor(c[-1] / segment_len_m)) + 1
    cell_of = np.minimum((c / segment_len_m).astype(int), n_cells - 1)
    reports = []
    for i in range(n_cells):
        sel = np.where(cell_of == i)[0]
        start = i * segment_len_m
        end = (i + 1) * segment_len_m
        if sel.size == 0:
            reports.append(
                SegmentReport(start, end, rms=0.0, mean_speed_mps=None, n_samples=0)
            )
            continue
        w = az[sel]
        seg_rms = rms(w - w.mean())
        present = [speeds[j] for j in sel if speeds[j] is not None]
        mean_speed = float(np.mean(present)) if present else None
        reports.append(
            SegmentReport(start, end, rms=seg_rms, mean_speed_mps=mean_speed, n_samples=int(sel.size))
        )
    return reports
