"""Curb-cloud compression: subsample, cluster, and fit open cubic B-splines.

The raw map-frame curb cloud is reduced to a list of segments.  Each
segment is either a clamped cubic B-spline (only control points and knots
are stored) or, where fitting is not applicable or fails, the raw points.
Fitted splines are scored by the goodness score: the product of the
fraction of sampled spline points that lie near a raw point and the
fraction of raw points that lie near a sampled spline point.

Fitting is randomized (repeated subset sampling), but fully deterministic
given the configured seed: each sub-cluster draws from its own RNG stream
derived from the segment index, so segments may also be fitted in parallel
without changing the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import BSpline
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import PointCloud3

__all__ = [
    "FitConfig",
    "SegmentShape",
    "CurbSegment",
    "voxel_subsample",
    "cluster_segments",
    "segment_shape",
    "fit_spline",
    "goodness_score",
    "sample_spline",
    "parameterize_cloud",
    "stored_point_count",
]


@dataclass(frozen=True)
class FitConfig:
    """Knobs of the compression pipeline. Defaults follow the map resolution
    of 30 cm end to end (voxel leaf, inlier distance, sampling spacing)."""

    voxel_leaf: float = 0.3
    cluster_tolerance: float = 2.0
    max_segment_extent: float = 20.0
    ratio_threshold: float = 4.0
    wide_width_threshold: float = 3.0
    control_points_per_meter: float = 0.25
    min_control_points: int = 4
    wide_control_points: int = 20
    ransac_iterations: int = 10
    gs_min: float = 0.5
    min_fit_points: int = 10
    inlier_distance: float = 0.3
    sample_spacing: float = 0.3
    refine_passes: int = 2
    seed: int = 0


@dataclass(frozen=True)
class SegmentShape:
    """Extent of a sub-cluster along its first two singular directions."""

    length: float
    width: float
    direction: np.ndarray  # first right-singular direction, canonical sign

    @property
    def ratio(self) -> float:
        if self.width < 1e-12:
            return float("inf")
        return self.length / self.width


@dataclass(frozen=True)
class CurbSegment:
    kind: str  # "spline" | "raw"
    goodness: float
    bounding_min: np.ndarray
    bounding_max: np.ndarray
    control_points: Optional[np.ndarray] = None  # (m, 3), spline only
    knots: Optional[np.ndarray] = None  # (m + 4,), clamped cubic
    raw_points: Optional[PointCloud3] = None  # raw only
    fallback_reason: Optional[str] = None  # why a raw segment is raw

    def __post_init__(self):
        if not 0.0 <= self.goodness <= 1.0:
            raise ValueError(f"goodness {self.goodness} outside [0, 1]")
        if self.kind == "spline":
            c = np.asarray(self.control_points, dtype=float)
            t = np.asarray(self.knots, dtype=float)
            if c.ndim != 2 or c.shape[0] < 4 or c.shape[1] != 3:
                raise ValueError("spline segment needs at least 4 control points")
            if t.shape != (c.shape[0] + 4,):
                raise ValueError("knot vector length must be control count + 4")
            if np.any(np.diff(t) < 0):
                raise ValueError("knots must be non-decreasing")
            if not (np.allclose(t[:4], t[0]) and np.allclose(t[-4:], t[-1])):
                raise ValueError("end knots must have multiplicity 4 (clamped)")
            object.__setattr__(self, "control_points", _readonly(c))
            object.__setattr__(self, "knots", _readonly(t))
        elif self.kind == "raw":
            if self.raw_points is None or len(self.raw_points) == 0:
                raise ValueError("raw segment needs points")
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        object.__setattr__(self, "bounding_min", _readonly(np.asarray(self.bounding_min, float)))
        object.__setattr__(self, "bounding_max", _readonly(np.asarray(self.bounding_max, float)))

    def intersects_ball(self, center: np.ndarray, radius: float) -> bool:
        """Axis-aligned box vs sphere overlap test."""
        closest = np.clip(center, self.bounding_min, self.bounding_max)
        return float(np.linalg.norm(closest - center)) <= radius


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def voxel_subsample(cloud: PointCloud3, leaf: float) -> PointCloud3:
    """Replace the points of each occupied voxel by their mean.

    Output order follows the lexicographic order of voxel indices, so the
    result is independent of the input point order.
    """
    if leaf <= 0.0:
        raise ValueError(f"leaf size must be positive, got {leaf}")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud3.empty(cloud.frame)
    keys = np.floor(pts / leaf).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    return PointCloud3(sums / counts[:, None], cloud.frame)


def _principal_direction(pts: np.ndarray) -> np.ndarray:
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    v = vt[0]
    # Canonical sign keeps the split bins (and downstream RNG draws) stable.
    if v[np.argmax(np.abs(v))] < 0.0:
        v = -v
    return v


def cluster_segments(cloud: PointCloud3, cfg: FitConfig = FitConfig()) -> list[PointCloud3]:
    """Two-step clustering: Euclidean grouping, then a split along the
    principal axis into chunks of bounded projected extent."""
    pts = cloud.points
    if len(pts) == 0:
        return []
    tree = cKDTree(pts)
    pairs = tree.query_pairs(r=cfg.cluster_tolerance, output_type="ndarray")
    if len(pairs):
        data = np.ones(len(pairs))
        adj = coo_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(len(pts), len(pts)))
        n_comp, labels = connected_components(adj, directed=False)
    else:
        n_comp, labels = len(pts), np.arange(len(pts))

    out: list[PointCloud3] = []
    for comp in range(n_comp):
        members = pts[labels == comp]
        if len(members) == 1:
            out.append(PointCloud3(members, cloud.frame))
            continue
        proj = members @ _principal_direction(members)
        lo = proj.min()
        extent = proj.max() - lo
        n_bins = max(1, int(np.ceil(extent / cfg.max_segment_extent - 1e-9)))
        idx = np.minimum((proj - lo) // cfg.max_segment_extent, n_bins - 1).astype(int)
        for b in range(n_bins):
            sub = members[idx == b]
            if len(sub):
                out.append(PointCloud3(sub, cloud.frame))
    return out


def segment_shape(cluster: PointCloud3) -> SegmentShape:
    """Extents along the first two right-singular directions of the
    mean-centered cluster."""
    pts = cluster.points
    if len(pts) < 2:
        raise ValueError("segment shape needs at least 2 points")
    centered = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    v0 = vt[0]
    if v0[np.argmax(np.abs(v0))] < 0.0:
        v0 = -v0
    proj0 = centered @ v0
    length = float(proj0.max() - proj0.min())
    if vt.shape[0] > 1:
        proj1 = centered @ vt[1]
        width = float(proj1.max() - proj1.min())
    else:
        width = 0.0
    return SegmentShape(length=length, width=width, direction=_readonly(v0))


def _clamped_knots(n_control: int) -> np.ndarray:
    interior = np.linspace(0.0, 1.0, n_control - 2)[1:-1]
    return np.concatenate([np.zeros(4), interior, np.ones(4)])


def _chord_parameters(pts: np.ndarray, direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Order points along ``direction`` and assign normalized chord-length
    parameters. Returns (order, parameters)."""
    order = np.argsort(pts @ direction, kind="stable")
    ordered = pts[order]
    chords = np.linalg.norm(np.diff(ordered, axis=0), axis=1)
    u = np.concatenate([[0.0], np.cumsum(chords)])
    total = u[-1]
    if total < 1e-12:
        raise np.linalg.LinAlgError("degenerate chord length")
    return order, u / total


def _design_matrix(u: np.ndarray, knots: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0 - 1e-12)
    return BSpline.design_matrix(u, knots, 3).toarray()


def _solve_controls(u: np.ndarray, pts: np.ndarray, knots: np.ndarray) -> np.ndarray:
    B = _design_matrix(u, knots)
    n_control = len(knots) - 4
    ctrl, _, rank, _ = np.linalg.lstsq(B, pts, rcond=None)
    if rank < n_control:
        raise np.linalg.LinAlgError("rank-deficient spline system")
    return ctrl

def _spline_curve(control_points: np.ndarray, knots: np.ndarray) -> BSpline:
    return BSpline(knots, control_points, 3, extrapolate=False)


def _fit_once(sample: np.ndarray, direction: np.ndarray, n_control: int,
              refine_passes: int) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares clamped cubic fit with foot-point parameter refinement."""
    knots = _clamped_knots(n_control)
    order, u = _chord_parameters(sample, direction)
    ordered = sample[order]
    ctrl = _solve_controls(u, ordered, knots)
    for _ in range(refine_passes):
        curve = _spline_curve(ctrl, knots)
        dense_u = np.linspace(0.0, 1.0 - 1e-12, 512)
        dense_pts = curve(dense_u)
        _, nearest = cKDTree(dense_pts).query(ordered)
        u = dense_u[nearest]
        ctrl = _solve_controls(u, ordered, knots)
    return ctrl, knots


def goodness_score(segment: CurbSegment, raw: PointCloud3, inlier_dist: float,
                   spacing: float = 0.3) -> float:
    """Product of the spline-side and point-side inlier fractions."""
    if len(raw) == 0:
        raise ValueError("goodness score needs a non-empty raw cloud")
    sampled = sample_spline(segment, spacing).points
    if len(sampled) == 0:
        raise ValueError("segment produced no sampled points")
    d_spline, _ = cKDTree(raw.points).query(sampled)
    d_raw, _ = cKDTree(sampled).query(raw.points)
    spline_frac = float(np.count_nonzero(d_spline <= inlier_dist)) / len(sampled)
    point_frac = float(np.count_nonzero(d_raw <= inlier_dist)) / len(raw)
    return spline_frac * point_frac


def sample_spline(segment: CurbSegment, spacing: float) -> PointCloud3:
    """Sample a spline segment at uniform arc-length steps.

    Raw segments pass through unchanged.  Arc length is approximated by a
    dense chord table, so consecutive gaps equal ``spacing`` up to the
    table resolution.
    """
    if spacing <= 0.0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    if segment.kind == "raw":
        return segment.raw_points
    curve = _spline_curve(segment.control_points, segment.knots)
    dense_u = np.linspace(0.0, 1.0 - 1e-12, 2048)
    dense_pts = curve(dense_u)
    chords = np.linalg.norm(np.diff(dense_pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(chords)])
    total = s[-1]
    targets = np.arange(0.0, total + 1e-9, spacing)
    if len(targets) < 2:
        targets = np.array([0.0, total])
    u = np.interp(targets, s, dense_u)
    return PointCloud3(curve(u), frame="map")


def _raw_segment(cluster: PointCloud3, reason: str) -> CurbSegment:
    pts = cluster.points
    return CurbSegment(
        kind="raw",
        goodness=1.0,
        bounding_min=pts.min(axis=0),
        bounding_max=pts.max(axis=0),
        raw_points=cluster,
        fallback_reason=reason,
    )


def control_point_count(shape: SegmentShape, cfg: FitConfig = FitConfig()) -> int:
    """Control-point budget: proportional to length with a floor, overridden
    to a fixed count for wide segments."""
    if shape.width > cfg.wide_width_threshold:
        return cfg.wide_control_points
    proportional = int(np.floor(cfg.control_points_per_meter * shape.length + 0.5))
    return max(cfg.min_control_points, proportional)


def fit_spline(cluster: PointCloud3, shape: SegmentShape, cfg: FitConfig = FitConfig(),
               segment_index: int = 0) -> CurbSegment:
    """Fit one sub-cluster, falling back to raw points when fitting is not
    applicable (too few points, blob-like shape) or fails (singular system,
    goodness below threshold).

    Subset sampling is repeated ``cfg.ransac_iterations`` times with a third
    of the points each; every candidate is scored against the full cluster
    and the best one kept.
    """
    pts = cluster.points
    n = len(pts)
    if n < cfg.min_fit_points:
        return _raw_segment(cluster, "too_few_points")
    if shape.ratio < cfg.ratio_threshold:
        return _raw_segment(cluster, "low_ratio")

    n_control = control_point_count(shape, cfg)
    n_sample = n // 3
    rng = np.random.default_rng([cfg.seed, segment_index])
    bounds = (pts.min(axis=0), pts.max(axis=0))
    # The clamped curve ends at the extreme parameters of whatever subset
    # is drawn, so the two projection extremes are always kept; otherwise
    # every candidate falls short of the segment ends.
    proj = pts @ shape.direction
    ends = np.array([int(np.argmin(proj)), int(np.argmax(proj))])

    best: Optional[tuple[float, np.ndarray, np.ndarray]] = None
    for _ in range(cfg.ransac_iterations):
        chosen = rng.choice(n, size=n_sample, replace=False)
        chosen = np.union1d(chosen, ends)
        sample = pts[chosen]
        for m in _control_candidates(n_control, n_sample, cfg.min_control_points):
            try:
                ctrl, knots = _fit_once(sample, shape.direction, m, cfg.refine_passes)
            except np.linalg.LinAlgError:
                continue
            candidate = CurbSegment(
                kind="spline", goodness=0.0,
                bounding_min=bounds[0], bounding_max=bounds[1],
                control_points=ctrl, knots=knots,
            )
            gs = goodness_score(candidate, cluster, cfg.inlier_distance, cfg.sample_spacing)
            if best is None or gs > best[0]:
                best = (gs, ctrl, knots)
            break

    if best is None:
        return _raw_segment(cluster, "singular_fit")
    gs, ctrl, knots = best
    if gs < cfg.gs_min:
        return _raw_segment(cluster, "low_score")
    return CurbSegment(
        kind="spline", goodness=gs,
        bounding_min=bounds[0], bounding_max=bounds[1],
        control_points=ctrl, knots=knots,
    )


def _control_candidates(n_control: int, n_sample: int, floor: int) -> list[int]:
    """Requested count first, then a reduced count that the sample supports."""
    candidates = [n_control]
    reduced = max(floor, min(n_control, n_sample))
    if reduced not in candidates:
        candidates.append(reduced)
    if floor not in candidates:
        candidates.append(floor)
    return candidates


def parameterize_cloud(cloud: PointCloud3, cfg: FitConfig = FitConfig()) -> list[CurbSegment]:
    """Full compression pipeline: voxel subsample, cluster, fit each
    sub-cluster."""
    subsampled = voxel_subsample(cloud, cfg.voxel_leaf)
    segments = []
    for i, sub in enumerate(cluster_segments(subsampled, cfg)):
        if len(sub) < 2:
            segments.append(_raw_segment(sub, "too_few_points"))
            continue
        shape = segment_shape(sub)
        segments.append(fit_spline(sub, shape, cfg, segment_index=i))
    return segments


def stored_point_count(segments) -> int:
    """Number of 3D points the compressed representation keeps."""
    total = 0
    for seg in segments:
        if seg.kind == "spline":
            total += len(seg.control_points)
        else:
            total += len(seg.raw_points)
    return total
