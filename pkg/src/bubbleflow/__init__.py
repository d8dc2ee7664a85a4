"""Bubble detection, tracking and flow statistics for radiograph sequences."""

from .denoise import CffParams, InstabilityError, curvature_flow_filter, default_params, gaussian_blur
from .imagestack import (
    CalibrationError,
    CalibrationSet,
    Frame,
    ImageStackError,
    Roi,
    SequenceMeta,
    build_calibration,
    load_sequence,
    normalize,
)
from .segment import Detection, SegmentParams, detect_bubbles, fit_ellipse, otsu_threshold
from .track import (
    FilterPolicy,
    GateParams,
    Trajectory,
    bin_velocity_profile,
    compute_velocities,
    envelope_stats,
    filter_detections,
    link_trajectories,
    snip_baseline,
)

__version__ = "0.1.0"
