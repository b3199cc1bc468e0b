"""Road telemetry toolkit: packages, sync, and roughness analysis."""

from .config import Config, load_config
from .errors import (
    NetworkError,
    ParseError,
    RoadsenseError,
    StateMachineError,
    UnsupportedVersionError,
    ValidationError,
)
from .geo import (
    FitMetrics,
    GpsAccuracySummary,
    Polyline,
    ReferenceIriRecord,
    haversine,
    join_reference,
    load_reference_csv,
    regression_metrics,
    snap_to_polyline,
    trace_accuracy,
)
from .kinematics import (
    DriveEvent,
    EventKind,
    SegmentReport,
    SpikeEvent,
    classify_events,
    classify_spike,
    detect_axis_spikes,
    rms,
    robust_scores,
    segment_roughness,
    sliding_rms,
)
from .model import (
    BlobEntry,
    FrameRef,
    GpsFix,
    PackageManifest,
    SensorSample,
    parse_manifest,
    serialize_manifest,
)
from .package import read_manifest, read_stream, read_streams, validate_package
from .packstore import (
    Uploader,
    UploadEvent,
    UploadState,
    UploadStatus,
    advance,
    create_package,
    recover,
    upload_library,
)
from .report import AnalysisReport, analyze, emit_report
from .timeline import TimeIndex, align_streams, interpolate_position

__version__ = "0.1.0"

__all__ = [
    "AnalysisReport",
    "BlobEntry",
    "Config",
    "DriveEvent",
    "EventKind",
    "FitMetrics",
    "FrameRef",
    "GpsAccuracySummary",
    "GpsFix",
    "NetworkError",
    "PackageManifest",
    "ParseError",
    "Polyline",
    "ReferenceIriRecord",
    "RoadsenseError",
    "SegmentReport",
    "SensorSample",
    "SpikeEvent",
    "StateMachineError",
    "TimeIndex",
    "UnsupportedVersionError",
    "UploadEvent",
    "UploadState",
    "UploadStatus",
    "Uploader",
    "ValidationError",
    "advance",
    "align_streams",
    "analyze",
    "classify_events",
    "classify_spike",
    "create_package",
    "detect_axis_spikes",
    "emit_report",
    "haversine",
    "interpolate_position",
    "join_reference",
    "load_config",
    "load_reference_csv",
    "parse_manifest",
    "read_manifest",
    "read_stream",
    "read_streams",
    "recover",
    "regression_metrics",
    "rms",
    "robust_scores",
    "segment_roughness",
    "serialize_manifest",
    "sliding_rms",
    "snap_to_polyline",
    "trace_accuracy",
    "upload_library",
    "validate_package",
]
