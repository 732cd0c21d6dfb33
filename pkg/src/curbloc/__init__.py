"""Curb-landmark mapping and vehicle localization toolkit.

Builds a compressed B-spline curb map anchored to a pose-graph base map,
then localizes a vehicle against it: NDT registration of per-frame curb
detections, a likelihood sanity check, and windowed pose-graph fusion
with wheel odometry.  A bundled simulator generates synthetic urban
worlds and drives for end-to-end evaluation.
"""

from .basemap import BaseMap, BaseMapVertex, load_base_map, save_base_map
from .config import Config, default_config, load_config, write_default_config
from .curbmap import (CurbMap, TemporalAnchoringError, associate_observation,
                      build_curb_map, load_curb_map, merge_sessions, save_curb_map)
from .evaluation import (RunMetrics, evaluate, evaluate_run, localization_success,
                         runtime_report, save_metrics_csv)
from .geometry import (DegenerateGeometryError, FrameMismatchError, Pose,
                       PointCloud3, apply, compose, inverse, yaw_difference)
from .graph import (AbsoluteEdge, GraphVertex, OdometryEdge, PoseGraph,
                    PoseGraphNumericalError, load_trajectory, save_trajectory)
from .ndt import (DegenerateReferenceError, NdtConfig, NdtGrid,
                  RegistrationNumericalError, RegistrationResult, build_grid,
                  matching_score, register, register_with_grid, remove_outliers)
from .pipeline import (FrameRecord, GraphConfig, RunResult, build_maps_from_drive,
                       run_localization)
from .simulate import (DriveFrame, NoiseSpec, Street, World, WorldSpec,
                       generate_world, load_dataset, save_dataset, simulate_drive,
                       standard_course)
from .splines import (CurbSegment, FitConfig, SegmentShape, cluster_segments,
                      fit_spline, goodness_score, parameterize_cloud, sample_spline,
                      segment_shape, voxel_subsample)
from .tracker import (PoseConstraint, TrackOutcome, Tracker, TrackerConfig,
                      retrieve_reference, track)

__version__ = "0.1.0"

__all__ = [
    "BaseMap", "BaseMapVertex", "load_base_map", "save_base_map",
    "Config", "default_config", "load_config", "write_default_config",
    "CurbMap", "TemporalAnchoringError", "associate_observation",
    "build_curb_map", "load_curb_map", "merge_sessions", "save_curb_map",
    "RunMetrics", "evaluate", "evaluate_run", "localization_success",
    "runtime_report", "save_metrics_csv",
    "DegenerateGeometryError", "FrameMismatchError", "Pose", "PointCloud3",
    "apply", "compose", "inverse", "yaw_difference",
    "AbsoluteEdge", "GraphVertex", "OdometryEdge", "PoseGraph",
    "PoseGraphNumericalError", "load_trajectory", "save_trajectory",
    "DegenerateReferenceError", "NdtConfig", "NdtGrid",
    "RegistrationNumericalError", "RegistrationResult", "build_grid",
    "matching_score", "register", "register_with_grid", "remove_outliers",
    "FrameRecord", "GraphConfig", "RunResult", "build_maps_from_drive",
    "run_localization",
    "DriveFrame", "NoiseSpec", "Street", "World", "WorldSpec",
    "generate_world", "load_dataset", "save_dataset", "simulate_drive",
    "standard_course",
    "CurbSegment", "FitConfig", "SegmentShape", "cluster_segments", "fit_spline",
    "goodness_score", "parameterize_cloud", "sample_spline", "segment_shape",
    "voxel_subsample",
    "PoseConstraint", "TrackOutcome", "Tracker", "TrackerConfig",
    "retrieve_reference", "track",
]
