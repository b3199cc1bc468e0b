"""Data model for a recording session ("package").

A package is one recording session: a manifest plus three timestamped
streams (IMU samples, GPS fixes, frame references). Timestamps inside the
streams are session-relative integer milliseconds; the wall-clock anchor
lives only in the manifest. Units are SI throughout: m/s² for
acceleration, rad/s for angular rate, meters and m/s for GPS.

All types are immutable values; invariants are checked at construction.
"""

from __future__ import annotations

import json
import math
import re
import uuid
from dataclasses import dataclass, field

from .canonical import dumps_canonical, dumps_jsonl_line
from .errors import ParseError, UnsupportedVersionError, ValidationError

SCHEMA_VERSION = 1

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")


def _require_finite(name: str, value) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise ValidationError(f"{name} must be finite, got {value!r}", field=name)
    return v


def _require_session_ms(name: str, value) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValidationError(f"{name} must be an integer ms value", field=name)
    if value < 0:
        raise ValidationError(f"{name} must be >= 0, got {value}", field=name)
    return value


@dataclass(frozen=True)
class SensorSample:
    """One 6-axis IMU reading at session time ``t`` (ms)."""

    t: int
    ax: float
    ay: float
    az: float
    gx: float
    gy: float
    gz: float

    def __post_init__(self):
        _require_session_ms("t", self.t)
        for name in ("ax", "ay", "az", "gx", "gy", "gz"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))

    def to_jsonl(self) -> bytes:
        return dumps_jsonl_line(
            {
                "t": self.t,
                "ax": self.ax,
                "ay": self.ay,
                "az": self.az,
                "gx": self.gx,
                "gy": self.gy,
                "gz": self.gz,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SensorSample":
        try:
            return cls(
                t=d["t"],
                ax=d["ax"],
                ay=d["ay"],
                az=d["az"],
                gx=d["gx"],
                gy=d["gy"],
                gz=d["gz"],
            )
        except KeyError as e:
            raise ValidationError(f"sensor sample missing field {e.args[0]!r}", field=e.args[0])


@dataclass(frozen=True)
class GpsFix:
    """One GPS fix at session time ``t`` (ms).

    ``speed_mps`` and ``h_acc_m`` may be absent (None).
    """

    t: int
    lat: float
    lon: float
    alt_m: float
    speed_mps: float | None = None
    h_acc_m: float | None = None

    def __post_init__(self):
        _require_session_ms("t", self.t)
        lat = _require_finite("lat", self.lat)
        lon = _require_finite("lon", self.lon)
        if not -90.0 <= lat <= 90.0:
            raise ValidationError(f"lat out of range [-90,90]: {lat}", field="lat")
        if not -180.0 <= lon <= 180.0:
            raise ValidationError(f"lon out of range [-180,180]: {lon}", field="lon")
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "alt_m", _require_finite("alt_m", self.alt_m))
        if self.speed_mps is not None:
            v = _require_finite("speed_mps", self.speed_mps)
            if v < 0:
                raise ValidationError(f"speed_mps must be >= 0, got {v}", field="speed_mps")
            object.__setattr__(self, "speed_mps", v)
        if self.h_acc_m is not None:
            v = _require_finite("h_acc_m", self.h_acc_m)
            if v < 0:
                raise ValidationError(f"h_acc_m must be >= 0, got {v}", field="h_acc_m")
            object.__setattr__(self, "h_acc_m", v)

    def to_jsonl(self) -> bytes:
        d = {"t": self.t, "lat": self.lat, "lon": self.lon, "alt_m": self.alt_m}
        if self.speed_mps is not None:
            d["speed_mps"] = self.speed_mps
        if self.h_acc_m is not None:
            d["h_acc_m"] = self.h_acc_m
        return dumps_jsonl_line(d)

    @classmethod
    def from_dict(cls, d: dict) -> "GpsFix":
        try:
            return cls(
                t=d["t"],
                lat=d["lat"],
                lon=d["lon"],
                alt_m=d["alt_m"],
                speed_mps=d.get("speed_mps"),
                h_acc_m=d.get("h_acc_m"),
            )
        except KeyError as e:
            raise ValidationError(f"gps fix missing field {e.args[0]!r}", field=e.args[0])


@dataclass(frozen=True)
class FrameRef:
    """Metadata reference to one captured video frame.

    ``file`` is a path relative to the package directory; absolute paths
    and ``..`` components are rejected so a manifest can never point
    outside its package.
    """

    t: int
    index: int
    file: str

    def __post_init__(self):
        _require_session_ms("t", self.t)
        if not isinstance(self.index, int) or isinstance(self.index, bool) or self.index < 0:
            raise ValidationError(f"frame index must be >= 0, got {self.index!r}", field="index")
        _check_relative_path("file", self.file)

    def to_jsonl(self) -> bytes:
        return dumps_jsonl_line({"t": self.t, "index": self.index, "file": self.file})

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRef":
        try:
            return cls(t=d["t"], index=d["index"], file=d["file"])
        except KeyError as e:
            raise ValidationError(f"frame ref missing field {e.args[0]!r}", field=e.args[0])


def _check_relative_path(field_name: str, p) -> str:
    if not isinstance(p, str) or not p:
        raise ValidationError(f"{field_name} must be a nonempty string", field=field_name)
    if p.startswith("/") or "\\" in p:
        raise ValidationError(f"{field_name} must be a relative POSIX path: {p!r}", field=field_name)
    parts = p.split("/")
    if any(part in ("", ".", "..") for part in parts):
        raise ValidationError(f"{field_name} must stay inside the package: {p!r}", field=field_name)
    return p


@dataclass(frozen=True)
class BlobEntry:
    """One payload file tracked by the manifest."""

    name: str
    bytes: int
    sha256: str

    def __post_init__(self):
        _check_relative_path("name", self.name)
        if not isinstance(self.bytes, int) or isinstance(self.bytes, bool) or self.bytes < 0:
            raise ValidationError(f"blob bytes must be >= 0, got {self.bytes!r}", field="bytes")
        if not isinstance(self.sha256, str) or not _SHA256_RE.match(self.sha256):
            raise ValidationError(
                f"blob sha256 must be 64 lowercase hex chars, got {self.sha256!r}",
                field="sha256",
            )


@dataclass(frozen=True)
class PackageManifest:
    """Session metadata plus the package's blob list and digests."""

    package_id: str
    device_id: str
    started_at_ms: int
    ended_at_ms: int
    blobs: tuple[BlobEntry, ...]
    sensor_rate_hz: int = 30
    frame_rate_fps: int = 10
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(
                f"schema_version must be {SCHEMA_VERSION}, got {self.schema_version!r}",
                field="schema_version",
            )
        try:
            uuid.UUID(self.package_id)
        except (ValueError, AttributeError, TypeError):
            raise ValidationError(
                f"package_id must be a UUID string, got {self.package_id!r}",
                field="package_id",
            )
        if not isinstance(self.device_id, str) or not self.device_id:
            raise ValidationError("device_id must be a nonempty string", field="device_id")
        for name in ("started_at_ms", "ended_at_ms"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ValidationError(f"{name} must be an integer", field=name)
        if self.ended_at_ms < self.started_at_ms:
            raise ValidationError(
                f"ended_at_ms ({self.ended_at_ms}) < started_at_ms ({self.started_at_ms})",
                field="ended_at_ms",
            )
        if not isinstance(self.sensor_rate_hz, int) or self.sensor_rate_hz <= 0:
            raise ValidationError(
                f"sensor_rate_hz must be > 0, got {self.sensor_rate_hz!r}",
                field="sensor_rate_hz",
            )
        if not isinstance(self.frame_rate_fps, int) or self.frame_rate_fps < 0:
            raise ValidationError(
                f"frame_rate_fps must be >= 0, got {self.frame_rate_fps!r}",
                field="frame_rate_fps",
            )
        object.__setattr__(self, "blobs", tuple(self.blobs))
        names = [b.name for b in self.blobs]
        if len(names) != len(set(names)):
            dup = next(n for n in names if names.count(n) > 1)
            raise ValidationError(f"duplicate blob name {dup!r}", field="blobs")

    def blob(self, name: str) -> BlobEntry | None:
        for b in self.blobs:
            if b.name == name:
                return b
        return None


def serialize_manifest(m: PackageManifest) -> bytes:
    """Encode *m* as canonical JSON (sorted keys, deterministic bytes)."""
    doc = {
        "schema_version": m.schema_version,
        "package_id": m.package_id,
        "device_id": m.device_id,
        "started_at_ms": m.started_at_ms,
        "ended_at_ms": m.ended_at_ms,
        "sensor_rate_hz": m.sensor_rate_hz,
        "frame_rate_fps": m.frame_rate_fps,
        "blobs": [
            {"name": b.name, "bytes": b.bytes, "sha256": b.sha256} for b in m.blobs
        ],
    }
    return dumps_canonical(doc)


def parse_manifest(b: bytes) -> PackageManifest:
    """Decode and validate manifest bytes.

    Raises ParseError (with byte offset) on malformed JSON,
    UnsupportedVersionError on a foreign schema_version, and
    ValidationError when an invariant fails.
    """
    if isinstance(b, str):
        b = b.encode("utf-8")
    try:
        doc = json.loads(b.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise ParseError(f"manifest is not UTF-8: {e}", offset=e.start)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed manifest JSON: {e.msg}", offset=e.pos)
    if not isinstance(doc, dict):
        raise ParseError("manifest JSON must be an object", offset=0)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UnsupportedVersionError(
            f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})"
        )
    blobs_doc = doc.get("blobs")
    if not isinstance(blobs_doc, list):
        raise ValidationError("blobs must be a list", field="blobs")
    blobs = []
    for entry in blobs_doc:
        if not isinstance(entry, dict):
            raise ValidationError("each blob must be an object", field="blobs")
        try:
            blobs.append(
                BlobEntry(name=entry["name"], bytes=entry["bytes"], sha256=entry["sha256"])
            )
        except KeyError as e:
            raise ValidationError(f"blob entry missing field {e.args[0]!r}", field="blobs")
    try:
        return PackageManifest(
            package_id=doc["package_id"],
            device_id=doc["device_id"],
            started_at_ms=doc["started_at_ms"],
            ended_at_ms=doc["ended_at_ms"],
            blobs=tuple(blobs),
            sensor_rate_hz=doc.get("sensor_rate_hz", 30),
            frame_rate_fps=doc.get("frame_rate_fps", 10),
            schema_version=version,
        )
    except KeyError as e:
        raise ValidationError(f"manifest missing field {e.args[0]!r}", field=e.args[0])


def decode_jsonl_stream(data: bytes, record_cls, stream_name: str):
    """Decode a JSONL blob into a list of *record_cls* records.

    Enforces the line discipline (UTF-8, LF, no trailing whitespace) only
    loosely: each nonempty line must parse as one JSON object.
    """
    records = []
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        if raw == b"":
            offset += 1
            continue
        try:
            d = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            pos = getattr(e, "pos", 0) or 0
            raise ParseError(
                f"{stream_name}: bad JSONL at line {lineno}", offset=offset + pos
            )
        if not isinstance(d, dict):
            raise ParseError(f"{stream_name}: line {lineno} is not an object", offset=offset)
        records.append(record_cls.from_dict(d))
        offset += len(raw) + 1
    return records


def encode_jsonl_stream(records) -> bytes:
    """Encode records (anything with ``to_jsonl``) as LF-terminated JSONL."""
    return b"".join(r.to_jsonl() + b"\n" for r in records)
