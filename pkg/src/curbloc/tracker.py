"""Runtime curb tracking: retrieve reference curbs near the prior,
register the detection, sanity-check the score, emit a pose constraint.

Every failure mode is encoded as a TrackOutcome status so a bad frame can
never abort the localization loop; the sanity check (mean likelihood over
a threshold) is the gatekeeper that keeps wrong alignments out of the
pose graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .basemap import BaseMap
from .curbmap import CurbMap
from .geometry import Pose, PointCloud3, apply, compose, yaw_difference
from .graph import AbsoluteEdge
from .ndt import (NdtConfig, RegistrationNumericalError, build_grid,
                  matching_score, register, remove_outliers)
from .splines import sample_spline

__all__ = ["TrackerConfig", "PoseConstraint", "TrackOutcome", "Tracker",
           "retrieve_reference", "track"]


def _default_covariance() -> np.ndarray:
    deg = np.deg2rad(1.0)
    return np.diag([0.15 ** 2, 0.15 ** 2, 0.5 ** 2,
                    (2 * deg) ** 2, (2 * deg) ** 2, deg ** 2])


def _default_sigma_floor() -> np.ndarray:
    # Body x runs along the curb in normal driving; curvature there looks
    # sharper than the noise-induced scatter of the optimum really is, so
    # its floor is wide while the well-identified lateral axis stays tight.
    deg = np.deg2rad(1.0)
    return np.array([0.25, 0.02, 0.05, 0.3 * deg, 0.3 * deg, 0.15 * deg])


def _default_sigma_cap() -> np.ndarray:
    deg = np.deg2rad(1.0)
    return np.array([2.0, 2.0, 2.0, 10 * deg, 10 * deg, 10 * deg])


@dataclass(frozen=True)
class TrackerConfig:
    r_lookup: float = 20.0  # meters; curb vertex search radius
    yaw_max: float = 45.0  # degrees; reject opposite-direction lanes
    min_points: int = 50
    # Fraction trimmed from each cloud before scoring.  Covers the worst
    # plausible clutter share of a detection at nominal clutter density.
    outlier_ratio: float = 0.25
    p_min: float = 0.45  # sanity-check likelihood threshold
    # Spline resampling step for the reference cloud.  Samples inside one
    # straight segment all share the same phase against the voxel grid, so a
    # coarse step shifts every cell mean in that segment by one frozen
    # along-curb offset that re-optimization can never average out; keep the
    # step well under a tenth of the cell size.
    sample_spacing: float = 0.1
    # Constraint covariance comes from the registration Hessian scaled by
    # info_scale, with per-axis floors and caps in the body frame.  A scene
    # that cannot pin an axis down (straight curb, along-track) then reports
    # a wide sigma on exactly that axis instead of a confident lie.  Set
    # info_scale to None to fall back to the fixed constraint_covariance.
    info_scale: Optional[float] = 1.4
    sigma_floor: np.ndarray = field(default_factory=_default_sigma_floor)
    sigma_cap: np.ndarray = field(default_factory=_default_sigma_cap)
    constraint_covariance: np.ndarray = field(default_factory=_default_covariance)
    # Largest believable single-frame position correction; beyond it the
    # registration slid to some other stretch of curb and the result is
    # rejected outright rather than averaged in.  None disables the gate.
    max_correction: Optional[float] = 2.0
    ndt: NdtConfig = field(default_factory=NdtConfig)

    def __post_init__(self):
        if min(self.r_lookup, self.yaw_max, self.min_points, self.outlier_ratio,
               self.sample_spacing) < 0:
            raise ValueError("tracker thresholds must be non-negative")
        if not 0.0 < self.p_min < 1.0:
            raise ValueError(f"p_min must be in (0, 1), got {self.p_min}")
        cov = np.asarray(self.constraint_covariance, dtype=float)
        if cov.shape != (6, 6):
            raise ValueError("constraint covariance must be 6x6")
        object.__setattr__(self, "constraint_covariance", cov)
        for name in ("sigma_floor", "sigma_cap"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (6,) or np.any(arr <= 0):
                raise ValueError(f"{name} must be 6 positive sigmas")
            object.__setattr__(self, name, arr)
        if np.any(self.sigma_floor > self.sigma_cap):
            raise ValueError("sigma_floor exceeds sigma_cap")


@dataclass(frozen=True)
class PoseConstraint:
    vertex_id: int
    T_estimate: Pose  # map frame to body frame
    covariance: np.ndarray
    score: float

    def to_edge(self) -> AbsoluteEdge:
        return AbsoluteEdge(self.vertex_id, self.T_estimate, self.covariance,
                            source="curb")


_STATUSES = ("accepted", "no_reference", "too_few_points", "low_score",
             "registration_failed", "diverged")


@dataclass(frozen=True)
class TrackOutcome:
    status: str
    constraint: Optional[PoseConstraint] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in _STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.status == "accepted") != (self.constraint is not None):
            raise ValueError("constraint must be present exactly when accepted")


def _curb_vertices(base_map: BaseMap):
    """(id, position, pose) for every vertex that carries curb data."""
    out = []
    for v in base_map.vertices:
        if v.curb_observation is not None and len(v.curb_observation) > 0:
            out.append((v.id, v.T_MB.translation, v.T_MB))
    return out


def _sampled_segments(curb_map: CurbMap, spacing: float):
    """Per segment: (sampled points, bounding min, bounding max)."""
    out = []
    for seg in curb_map.segments:
        pts = sample_spline(seg, spacing).points
        out.append((pts, seg.bounding_min, seg.bounding_max))
    return out


def _select_vertex(curb_vertices, prior: Pose, cfg: TrackerConfig):
    best = None
    p = prior.translation
    for vid, pos, pose in curb_vertices:
        dist = float(np.linalg.norm(pos - p))
        if dist > cfg.r_lookup:
            continue
        if yaw_difference(prior, pose) > cfg.yaw_max:
            continue
        if best is None or dist < best[1]:
            best = (vid, dist, pos)
    return best


def _collect_reference(sampled, center: np.ndarray, radius: float) -> Optional[PointCloud3]:
    chunks = []
    for pts, lo, hi in sampled:
        closest = np.clip(center, lo, hi)
        if float(np.linalg.norm(closest - center)) <= radius:
            chunks.append(pts)
    if not chunks:
        return None
    return PointCloud3(np.concatenate(chunks, axis=0), frame="map")


def retrieve_reference(base_map: BaseMap, curb_map: CurbMap, prior: Pose,
                       cfg: TrackerConfig = TrackerConfig()) -> Optional[PointCloud3]:
    """Reference curb points near the prior, or None when no curb vertex
    within r_lookup passes the yaw gate.

    The union of segments around the chosen vertex, not the vertex's own
    observation, forms the reference: the compressed map only stores
    segments, and the r_lookup ball reproduces the original neighborhood.
    """
    picked = _select_vertex(_curb_vertices(base_map), prior, cfg)
    if picked is None:
        return None
    sampled = _sampled_segments(curb_map, cfg.sample_spacing)
    return _collect_reference(sampled, picked[2], cfg.r_lookup)


def _track_internal(prior: Pose, detection: PointCloud3, curb_vertices, sampled,
                    cfg: TrackerConfig, vertex_id: int) -> TrackOutcome:
    diag = {"n_detection": len(detection)}
    picked = _select_vertex(curb_vertices, prior, cfg)
    if picked is None:
        return TrackOutcome("no_reference", diagnostics=diag)
    diag["retrieval_vertex"] = picked[0]
    diag["retrieval_distance"] = picked[1]
    reference = _collect_reference(sampled, picked[2], cfg.r_lookup)
    if reference is None:
        return TrackOutcome("no_reference", diagnostics=diag)
    diag["n_reference"] = len(reference)

    # The reference only covers the lookup ball, so detection points beyond
    # it can never find a matching cell; crop them instead of letting them
    # drag the mean likelihood down.
    moved = apply(prior, detection)
    within = np.linalg.norm(moved.points - picked[2], axis=1) <= cfg.r_lookup
    moved = PointCloud3(moved.points[within], moved.frame)
    diag["n_used"] = len(moved)

    if len(moved) < cfg.min_points or len(reference) < cfg.min_points:
        return TrackOutcome("too_few_points", diagnostics=diag)

    # Register before trimming anything.  The exponential cell weights
    # already mute stray points, whereas a distance trim keyed to a drifted
    # prior would throw away exactly the points that witness the drift.
    try:
        result = register(moved, reference, Pose.identity("map"), cfg.ndt)
    except RegistrationNumericalError:
        return TrackOutcome("registration_failed", diagnostics=diag)
    diag["raw_score"] = result.score
    diag["iterations"] = result.iterations
    if not result.converged:
        return TrackOutcome("registration_failed", diagnostics=diag)

    # Sanity-check score on the aligned detection with stray points trimmed
    # at the aligned pose, where real curb evidence and clutter separate.
    aligned = apply(result.T_align, moved)
    scored, _ = remove_outliers(aligned, reference, cfg.outlier_ratio)
    grid = build_grid(reference, cfg.ndt.cell_size, cfg.ndt.min_cell_points,
                      cfg.ndt.eps_reg)
    score = matching_score(scored, grid)
    diag["score"] = score
    if score <= cfg.p_min:
        return TrackOutcome("low_score", diagnostics=diag)

    # T_align corrects poses in the map frame (the detection was already
    # moved there by the prior), so it composes on the map side.
    estimate = compose(result.T_align, prior)
    correction = float(np.linalg.norm(estimate.translation - prior.translation))
    diag["correction"] = correction
    if cfg.max_correction is not None and correction > cfg.max_correction:
        return TrackOutcome("diverged", diagnostics=diag)
    covariance = _constraint_covariance(result.hessian, estimate, cfg)
    diag["sigma_body"] = np.sqrt(np.diag(covariance)).tolist()
    constraint = PoseConstraint(vertex_id, estimate, covariance, score)
    return TrackOutcome("accepted", constraint=constraint, diagnostics=diag)


def _constraint_covariance(hessian, estimate: Pose, cfg: TrackerConfig) -> np.ndarray:
    """Body-frame diagonal covariance from the registration Hessian.

    The inverse Hessian is the shape of the alignment uncertainty up to a
    scale; projecting its diagonal into the estimated body axes turns
    "this scene cannot fix the along-track axis" into a wide sigma on
    body x rather than a global failure.
    """
    if cfg.info_scale is None or hessian is None:
        return cfg.constraint_covariance
    inv = np.linalg.pinv((hessian + hessian.T) / 2.0)
    Rb = estimate.rotation_matrix
    var_t = np.diag(Rb.T @ inv[:3, :3] @ Rb)
    var_r = np.diag(Rb.T @ inv[3:, 3:] @ Rb)
    sigma = cfg.info_scale * np.sqrt(np.maximum(np.concatenate([var_t, var_r]), 0.0))
    sigma = np.clip(sigma, cfg.sigma_floor, cfg.sigma_cap)
    return np.diag(sigma ** 2)


def track(prior: Pose, detection: PointCloud3, base_map: BaseMap, curb_map: CurbMap,
          cfg: TrackerConfig = TrackerConfig(), vertex_id: int = 0) -> TrackOutcome:
    """One-shot tracking call; builds the retrieval caches on the fly.

    For a frame loop, use Tracker, which precomputes them once.
    """
    return _track_internal(prior, detection, _curb_vertices(base_map),
                           _sampled_segments(curb_map, cfg.sample_spacing),
                           cfg, vertex_id)


class Tracker:
    """Stateful wrapper with precomputed retrieval caches and an optional
    line-delimited diagnostics log (one JSON record per processed frame)."""

    def __init__(self, base_map: BaseMap, curb_map: CurbMap,
                 cfg: TrackerConfig = TrackerConfig(), log_path=None):
        self.cfg = cfg
        self._curb_vertices = _curb_vertices(base_map)
        self._sampled = _sampled_segments(curb_map, cfg.sample_spacing)
        self.status_counts = {s: 0 for s in _STATUSES}
        self._log = open(log_path, "w") if log_path else None

    def close(self) -> None:
        if self._log:
            self._log.close()
            self._log = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def track(self, prior: Pose, detection: PointCloud3, vertex_id: int,
              timestamp: int = 0) -> TrackOutcome:
        outcome = _track_internal(prior, detection, self._curb_vertices,
                                  self._sampled, self.cfg, vertex_id)
        self.status_counts[outcome.status] += 1
        if self._log:
            record = {"timestamp": timestamp, "vertex": vertex_id,
                      "status": outcome.status}
            record.update(outcome.diagnostics)
            self._log.write(json.dumps(record) + "\n")
        return outcome
