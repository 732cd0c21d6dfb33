"""Synthetic urban worlds and drives: curb geometry, ground-truth
trajectory, drifting odometry, and noisy curb detections.

A world is built from street centerlines; curbs flank each street at half
the lane width and are broken at intersections and at seeded driveway
gaps, so along-track structure exists even on straight blocks.  A drive
follows the street centerlines at constant speed and yields one frame per
sensor period: ground-truth pose, noisy odometry step, body-frame curb
detection, and a visual-availability flag used by the fusion experiments.

Everything is deterministic given the spec seed plus the drive seed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .cloud_io import load_cloud_csv, save_cloud_csv
from .geometry import Pose, PointCloud3, apply, compose, inverse

__all__ = [
    "Street",
    "WorldSpec",
    "World",
    "DriveFrame",
    "NoiseSpec",
    "generate_world",
    "simulate_drive",
    "standard_course",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class Street:
    waypoints: np.ndarray  # (n, 2) centerline vertices
    lane_width: float = 7.0

    def __post_init__(self):
        pts = np.asarray(self.waypoints, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("street needs at least two 2D waypoints")
        if self.lane_width <= 0.0:
            raise ValueError("lane width must be positive")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "waypoints", pts)


@dataclass(frozen=True)
class WorldSpec:
    seed: int
    streets: tuple[Street, ...]
    intersections: tuple[tuple[float, float, float], ...] = ()  # (x, y, radius)
    curb_density: float = 5.0  # points per meter of curb line
    curb_height: float = 0.12
    driveway_gap_spacing: float = 0.0  # mean meters between gaps, 0 disables
    driveway_gap_length: float = 3.0

    def __post_init__(self):
        if self.curb_density <= 0.0:
            raise ValueError("curb density must be positive")
        if self.curb_height <= 0.0:
            raise ValueError("curb height must be positive")


@dataclass(frozen=True)
class World:
    spec: WorldSpec
    curb_pieces: tuple[np.ndarray, ...]  # contiguous (k, 3) point runs
    curb_points: PointCloud3  # all pieces concatenated, map frame
    route: np.ndarray  # (m, 2) driven centerline


@dataclass(frozen=True)
class NoiseSpec:
    odom_drift_per_m: float = 0.02  # translation std per meter travelled
    odom_yaw_drift_per_m: float = 0.0  # radians std per meter travelled
    detection_sigma: float = 0.05
    dropout: float = 0.2
    clutter_per_m2: float = 0.0  # false positives per m^2 of curb band
    clutter_band: float = 2.0  # curb band half-width for clutter placement


@dataclass(frozen=True)
class DriveFrame:
    timestamp: int  # nanoseconds
    gt_pose: Pose
    odom_step: Optional[Pose]  # None on the first frame
    detection: PointCloud3  # body frame
    visual_available: bool


def _segments_intersect(a0, a1, b0, b1) -> bool:
    def orient(p, q, r):
        return np.sign((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))

    o1, o2 = orient(a0, a1, b0), orient(a0, a1, b1)
    o3, o4 = orient(b0, b1, a0), orient(b0, b1, a1)
    return o1 != o2 and o3 != o4


def _check_simple(waypoints: np.ndarray) -> None:
    n = len(waypoints) - 1
    for i in range(n):
        for j in range(i + 2, n):
            # Skip the wrap-around pair of a closed ring.
            if i == 0 and j == n - 1 and np.allclose(waypoints[0], waypoints[-1]):
                continue
            if _segments_intersect(waypoints[i], waypoints[i + 1],
                                   waypoints[j], waypoints[j + 1]):
                raise ValueError("street centerline intersects itself")


def _offset_polyline(waypoints: np.ndarray, offset: float) -> np.ndarray:
    """Parallel curve at signed lateral offset, miter-joined at vertices."""
    dirs = np.diff(waypoints, axis=0)
    lens = np.linalg.norm(dirs, axis=1)
    if np.any(lens < 1e-9):
        raise ValueError("duplicate consecutive waypoints")
    dirs = dirs / lens[:, None]
    normals = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)
    out = [waypoints[0] + offset * normals[0]]
    for k in range(1, len(waypoints) - 1):
        n_sum = normals[k - 1] + normals[k]
        denom = 1.0 + float(normals[k - 1] @ normals[k])
        if denom < 1e-6:
            raise ValueError("street doubles back on itself")
        out.append(waypoints[k] + offset * n_sum / denom)
    out.append(waypoints[-1] + offset * normals[-1])
    return np.array(out)


def _sample_polyline(waypoints: np.ndarray, spacing: float) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced samples; returns (points, cumulative arc length)."""
    seg = np.diff(waypoints, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    s_knots = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = s_knots[-1]
    n = max(2, int(np.floor(total / spacing)) + 1)
    s = np.linspace(0.0, total, n)
    x = np.interp(s, s_knots, waypoints[:, 0])
    y = np.interp(s, s_knots, waypoints[:, 1])
    return np.stack([x, y], axis=1), s


def generate_world(spec: WorldSpec) -> World:
    """Deterministic world construction from the spec.

    Curbs flank each street at half lane width, are carved out inside
    every intersection disk, and optionally lose seeded driveway gaps.
    """
    rng = np.random.default_rng([spec.seed, 0x5EED])
    spacing = 1.0 / spec.curb_density
    pieces: list[np.ndarray] = []
    for street in spec.streets:
        _check_simple(street.waypoints)
        for side in (+1.0, -1.0):
            curb2d = _offset_polyline(street.waypoints, side * street.lane_width * 0.5)
            samples, s = _sample_polyline(curb2d, spacing)
            keep = np.ones(len(samples), dtype=bool)
            for cx, cy, radius in spec.intersections:
                d = np.hypot(samples[:, 0] - cx, samples[:, 1] - cy)
                keep &= d > radius
            if spec.driveway_gap_spacing > 0.0:
                total = s[-1]
                pos = rng.uniform(0.0, spec.driveway_gap_spacing)
                while pos < total:
                    keep &= ~((s >= pos) & (s < pos + spec.driveway_gap_length))
                    pos += spec.driveway_gap_spacing * rng.uniform(0.6, 1.4)
            pieces.extend(_split_runs(samples, keep, spec.curb_height))

    if pieces:
        all_points = np.concatenate(pieces, axis=0)
    else:
        all_points = np.zeros((0, 3))
    route_street = spec.streets[0]
    return World(
        spec=spec,
        curb_pieces=tuple(pieces),
        curb_points=PointCloud3(all_points, frame="map"),
        route=route_street.waypoints,
    )


def _split_runs(samples: np.ndarray, keep: np.ndarray, height: float) -> list[np.ndarray]:
    """Contiguous kept runs become separate curb pieces, lifted to curb height."""
    out = []
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return out
    breaks = np.flatnonzero(np.diff(idx) > 1)
    for chunk in np.split(idx, breaks + 1):
        pts = samples[chunk]
        out.append(np.column_stack([pts, np.full(len(pts), height)]))
    return out


def _route_pose(route: np.ndarray, s: float, s_knots: np.ndarray,
                dirs: np.ndarray) -> Pose:
    k = int(np.searchsorted(s_knots[1:-1], s, side="right"))
    frac = s - s_knots[k]
    p = route[k] + dirs[k] * frac
    yaw = float(np.arctan2(dirs[k][1], dirs[k][0]))
    return Pose.from_yaw(yaw, np.array([p[0], p[1], 0.0]))


def simulate_drive(world: World, noise: NoiseSpec = NoiseSpec(), seed: int = 0,
                   speed: float = 8.0, frame_rate: float = 10.0,
                   sensor_range: float = 30.0,
                   visual_mask: Sequence[tuple[float, float]] = ()) -> list[DriveFrame]:
    """Drive the route at constant speed and emit one frame per period.

    ``visual_mask`` lists arc-length intervals (meters along the route)
    where the visual localization flag is forced off.
    """
    route = world.route
    seg = np.diff(route, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    dirs = seg / seg_len[:, None]
    s_knots = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = float(s_knots[-1])
    step = speed / frame_rate
    n_frames = int(np.floor(total / step)) + 1
    period_ns = int(round(1e9 / frame_rate))

    rng = np.random.default_rng([seed, world.spec.seed, 0xD21FE])
    curb = world.curb_points.points
    frames: list[DriveFrame] = []
    prev_pose: Optional[Pose] = None
    for t in range(n_frames):
        s = min(t * step, total)
        gt = _route_pose(route, s, s_knots, dirs)

        odom: Optional[Pose] = None
        if prev_pose is not None:
            rel = compose(inverse(prev_pose), gt)
            step_len = float(np.linalg.norm(rel.translation))
            sigma = noise.odom_drift_per_m * step_len
            jitter = np.array([rng.normal(0.0, sigma), rng.normal(0.0, sigma), 0.0]) \
                if sigma > 0.0 else np.zeros(3)
            yaw_sigma = noise.odom_yaw_drift_per_m * step_len
            yaw_jitter = rng.normal(0.0, yaw_sigma) if yaw_sigma > 0.0 else 0.0
            wobble = Pose.from_yaw(yaw_jitter, jitter, parent_frame="body", child_frame="body")
            odom = compose(rel, wobble)

        near = curb[np.hypot(curb[:, 0] - gt.translation[0],
                             curb[:, 1] - gt.translation[1]) <= sensor_range]
        if len(near):
            kept = near[rng.random(len(near)) >= noise.dropout]
        else:
            kept = near
        if noise.detection_sigma > 0.0 and len(kept):
            kept = kept + rng.normal(0.0, noise.detection_sigma, kept.shape)
        clutter = _draw_clutter(rng, near, world.spec, noise)
        pts_map = np.concatenate([kept, clutter], axis=0) if len(clutter) else kept
        detection = apply(inverse(gt), PointCloud3(pts_map, frame="map"))

        visual = not any(lo <= s < hi for lo, hi in visual_mask)
        frames.append(DriveFrame(
            timestamp=t * period_ns,
            gt_pose=gt,
            odom_step=odom,
            detection=detection,
            visual_available=visual,
        ))
        prev_pose = gt
    return frames


def _draw_clutter(rng: np.random.Generator, near_curb: np.ndarray, spec: WorldSpec,
                  noise: NoiseSpec) -> np.ndarray:
    """False positives hug the curb structure: each clutter point sits
    within the configured band of a real curb point."""
    if noise.clutter_per_m2 <= 0.0 or len(near_curb) == 0:
        return np.zeros((0, 3))
    visible_length = len(near_curb) / spec.curb_density
    area = visible_length * 2.0 * noise.clutter_band
    count = int(rng.poisson(noise.clutter_per_m2 * area))
    if count == 0:
        return np.zeros((0, 3))
    anchors = near_curb[rng.integers(0, len(near_curb), count)]
    angles = rng.uniform(0.0, 2.0 * np.pi, count)
    radii = noise.clutter_band * np.sqrt(rng.uniform(0.0, 1.0, count))
    offsets = np.stack([radii * np.cos(angles), radii * np.sin(angles),
                        rng.uniform(-spec.curb_height, spec.curb_height, count)], axis=1)
    return anchors + offsets


def standard_course(seed: int = 0, block: float = 500.0, lane_width: float = 7.0,
                    curb_density: float = 5.0, intersection_radius: float = 12.0,
                    driveway_gap_spacing: float = 45.0,
                    stub_length: float = 30.0) -> WorldSpec:
    """Square course with a 4-way intersection at every corner.

    The default block size gives a 4 * block route; cross-street stubs at
    each corner provide the perpendicular curb structure the alignment
    needs, and driveway gaps break up long straights the way real curbs
    do.  Coverage lands near ninety percent of the driven distance.
    """
    b = block
    ring = Street(np.array([
        [0.0, 0.0], [b, 0.0], [b, b], [0.0, b], [0.0, 0.0],
    ]), lane_width)
    corners = [(0.0, 0.0), (b, 0.0), (b, b), (0.0, b)]
    outward = [((-1, 0), (0, -1)), ((1, 0), (0, -1)), ((1, 0), (0, 1)), ((-1, 0), (0, 1))]
    stubs = []
    for (cx, cy), dir_pair in zip(corners, outward):
        for dx, dy in dir_pair:
            stubs.append(Street(np.array([
                [cx, cy],
                [cx + dx * stub_length, cy + dy * stub_length],
            ]), lane_width))
    intersections = tuple((cx, cy, intersection_radius) for cx, cy in corners)
    return WorldSpec(
        seed=seed,
        streets=(ring, *stubs),
        intersections=intersections,
        curb_density=curb_density,
        driveway_gap_spacing=driveway_gap_spacing,
    )


# -- dataset on disk -------------------------------------------------------

_MANIFEST = "manifest.csv"


def save_dataset(frames: list[DriveFrame], directory) -> None:
    """Directory layout: manifest.csv plus one point-cloud CSV per frame."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for i, f in enumerate(frames):
        cloud_name = f"frame_{i:06d}.csv"
        save_cloud_csv(f.detection, os.path.join(directory, cloud_name))
        gt = [f"{v:.17g}" for v in (*f.gt_pose.rotation, *f.gt_pose.translation)]
        if f.odom_step is not None:
            od = [f"{v:.17g}" for v in (*f.odom_step.rotation, *f.odom_step.translation)]
        else:
            od = [""] * 7
        rows.append([f.timestamp, *gt, *od, int(f.visual_available), cloud_name])
    with open(os.path.join(directory, _MANIFEST), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "timestamp",
            "gt_qw", "gt_qx", "gt_qy", "gt_qz", "gt_x", "gt_y", "gt_z",
            "od_qw", "od_qx", "od_qy", "od_qz", "od_x", "od_y", "od_z",
            "visual", "cloud",
        ])
        writer.writerows(rows)


def load_dataset(directory) -> list[DriveFrame]:
    path = os.path.join(directory, _MANIFEST)
    frames = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "timestamp":
            raise ValueError(f"{path}: not a dataset manifest")
        for row in reader:
            stamp = int(row[0])
            gt = Pose(np.array([float(v) for v in row[1:5]]),
                      np.array([float(v) for v in row[5:8]]))
            odom = None
            if row[8]:
                odom = Pose(np.array([float(v) for v in row[8:12]]),
                            np.array([float(v) for v in row[12:15]]),
                            parent_frame="body", child_frame="body")
            visual = bool(int(row[15]))
            cloud = load_cloud_csv(os.path.join(directory, row[16]), frame="body")
            frames.append(DriveFrame(stamp, gt, odom, cloud, visual))
    return frames
