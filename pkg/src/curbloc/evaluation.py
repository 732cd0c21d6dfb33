"""Localization metrics: distance-based recall, planar/lateral/orientation
error percentiles, and runtime accounting.

Recall is the fraction of travelled distance whose end frame is
localized, so it is invariant under re-timing of the frame stream.
Error statistics are computed over localized frames only, pairing the
recall figure with the accuracy of the successful localizations.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose
from .pipeline import FrameRecord, RunResult

__all__ = ["RunMetrics", "evaluate", "evaluate_run", "localization_success",
           "runtime_report", "save_metrics_csv", "recall_over_interval"]


@dataclass(frozen=True)
class RunMetrics:
    recall_pct: float
    planar_median: float
    planar_p90: float
    lateral_median: float
    lateral_p90: float
    orientation_median_deg: float
    orientation_p90_deg: float
    z_median: float  # reported for completeness, excluded from gating
    n_frames: int
    n_localized: int
    runtimes_ms: dict = field(default_factory=dict)

    def table_row(self) -> str:
        """Recall | planar median [p90], lateral median [p90] | yaw median [p90]."""
        return (f"{self.recall_pct:.1f} | "
                f"{self.planar_median:.2f} [{self.planar_p90:.2f}], "
                f"{self.lateral_median:.2f} [{self.lateral_p90:.2f}] | "
                f"{self.orientation_median_deg:.2f} [{self.orientation_p90_deg:.2f}]")


def localization_success(visual_available: bool, curb_accepted: bool) -> bool:
    """A frame is localized when either pipeline produced a pose fix."""
    return bool(visual_available or curb_accepted)


def _pose_errors(estimate: Pose, truth: Pose) -> tuple[float, float, float, float]:
    """(planar, lateral, orientation degrees, z) against ground truth.

    The lateral component is the error expressed in the ground-truth body
    frame, i.e. across the direction of travel.
    """
    diff = estimate.translation - truth.translation
    planar = float(np.hypot(diff[0], diff[1]))
    body_err = truth.rotation_matrix.T @ diff
    lateral = float(abs(body_err[1]))
    rel = truth.rotation_matrix.T @ estimate.rotation_matrix
    cos_angle = np.clip((np.trace(rel) - 1.0) * 0.5, -1.0, 1.0)
    orientation = float(np.degrees(np.arccos(cos_angle)))
    return planar, lateral, orientation, float(abs(diff[2]))


def evaluate(estimates: Sequence, truth: Sequence,
             localized: Optional[Sequence[bool]] = None,
             runtimes_ms: Optional[dict] = None) -> RunMetrics:
    """Compare an estimated trajectory against ground truth.

    ``estimates`` and ``truth`` are parallel sequences of objects with
    ``timestamp`` plus a pose (``estimate`` / ``gt_pose`` attribute, or a
    plain Pose).  ``localized`` overrides the per-frame flags; without it
    each estimate must carry a ``localized`` attribute.
    """
    if len(estimates) != len(truth):
        raise ValueError(f"length mismatch: {len(estimates)} estimates vs "
                         f"{len(truth)} truth frames")
    est_poses, est_stamps, est_flags = _unpack(estimates, ("estimate", "gt_pose"))
    gt_poses, gt_stamps, _ = _unpack(truth, ("gt_pose", "estimate"))
    for a, b in zip(est_stamps, gt_stamps):
        if a != b:
            raise ValueError(f"timestamp mismatch: {a} vs {b}")
    flags = list(localized) if localized is not None else est_flags
    if flags is None or len(flags) != len(estimates):
        raise ValueError("need one localized flag per frame")

    total = 0.0
    localized_dist = 0.0
    for k in range(1, len(gt_poses)):
        d = float(np.linalg.norm(gt_poses[k].translation - gt_poses[k - 1].translation))
        total += d
        if flags[k]:
            localized_dist += d
    recall = 100.0 * localized_dist / total if total > 0.0 else 100.0

    errs = np.array([_pose_errors(e, g)
                     for e, g, ok in zip(est_poses, gt_poses, flags) if ok])
    if len(errs):
        med = np.median(errs, axis=0)
        p90 = np.percentile(errs, 90, axis=0)
    else:
        med = p90 = np.full(4, np.nan)
    return RunMetrics(
        recall_pct=recall,
        planar_median=float(med[0]), planar_p90=float(p90[0]),
        lateral_median=float(med[1]), lateral_p90=float(p90[1]),
        orientation_median_deg=float(med[2]), orientation_p90_deg=float(p90[2]),
        z_median=float(med[3]),
        n_frames=len(estimates), n_localized=int(np.count_nonzero(flags)),
        runtimes_ms=runtimes_ms or {},
    )


def _unpack(seq: Sequence, pose_attrs: tuple):
    poses, stamps, flags = [], [], []
    have_flags = True
    for item in seq:
        pose = None
        for attr in pose_attrs:
            pose = getattr(item, attr, None)
            if pose is not None:
                break
        if pose is None:
            pose = item if isinstance(item, Pose) else getattr(item, "pose", None)
        if pose is None:
            raise TypeError(f"cannot extract a pose from {type(item).__name__}")
        poses.append(pose)
        stamps.append(getattr(item, "timestamp", None))
        flag = getattr(item, "localized", None)
        if flag is None:
            have_flags = False
        else:
            flags.append(bool(flag))
    return poses, stamps, (flags if have_flags else None)


def evaluate_run(result: RunResult, curb_only: bool = False) -> RunMetrics:
    """Metrics for a pipeline run; ``curb_only`` ignores the visual flag,
    isolating what curb tracking alone keeps localized."""
    records = result.records
    if curb_only:
        flags = [r.curb_accepted for r in records]
    else:
        flags = [localization_success(r.visual_available, r.curb_accepted)
                 for r in records]
    return evaluate(records, records, localized=flags,
                    runtimes_ms=runtime_report(result))


def recall_over_interval(records: Sequence[FrameRecord], s_ranges: Sequence[tuple],
                         flags: Sequence[bool]) -> float:
    """Recall restricted to given arc-length ranges of the ground-truth
    route (meters from the start).  Used by the masked-stretch studies."""
    s = 0.0
    total = 0.0
    got = 0.0
    for k in range(1, len(records)):
        d = float(np.linalg.norm(records[k].gt_pose.translation -
                                 records[k - 1].gt_pose.translation))
        mid = s + 0.5 * d
        s += d
        if any(lo <= mid < hi for lo, hi in s_ranges):
            total += d
            if flags[k]:
                got += d
    return 100.0 * got / total if total > 0.0 else 100.0


def runtime_report(result: RunResult) -> dict:
    """Mean wall-clock milliseconds per pipeline stage."""
    records = [r for r in result.records if r.status != "initialized"]
    if not records:
        return {}
    return {
        "curb_tracking_ms": float(np.mean([r.track_ms for r in records])),
        "graph_update_ms": float(np.mean([r.graph_ms for r in records])),
    }


_CSV_COLUMNS = ["dataset", "map_sessions", "recall_pct",
                "planar_median", "planar_p90", "lateral_median", "lateral_p90",
                "orientation_median_deg", "orientation_p90_deg", "z_median",
                "curb_tracking_ms", "graph_update_ms"]


def save_metrics_csv(rows: list[tuple[str, int, RunMetrics]], path) -> None:
    """One row per run: dataset id, number of mapping sessions, metrics."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for dataset, sessions, m in rows:
            writer.writerow([
                dataset, sessions, f"{m.recall_pct:.3f}",
                f"{m.planar_median:.4f}", f"{m.planar_p90:.4f}",
                f"{m.lateral_median:.4f}", f"{m.lateral_p90:.4f}",
                f"{m.orientation_median_deg:.4f}", f"{m.orientation_p90_deg:.4f}",
                f"{m.z_median:.4f}",
                f"{m.runtimes_ms.get('curb_tracking_ms', float('nan')):.3f}",
                f"{m.runtimes_ms.get('graph_update_ms', float('nan')):.3f}",
            ])
