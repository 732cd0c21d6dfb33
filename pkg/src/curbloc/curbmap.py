"""Assemble curb observations anchored to base-map vertices into one
compressed map-frame curb map.

Each curb detection cloud is recorded in the body frame of the base-map
vertex it is anchored to.  Building the curb map transforms every anchored
cloud by its vertex pose, concatenates them in the map frame, and runs the
compression pipeline.  Because anchoring is per vertex, a later base-map
relaxation moves the curb data along with the poses by a rebuild.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basemap import BaseMap
from .geometry import PointCloud3, apply
from .splines import CurbSegment, FitConfig, parameterize_cloud, stored_point_count

__all__ = [
    "TemporalAnchoringError",
    "CurbMap",
    "associate_observation",
    "build_curb_map",
    "merge_sessions",
    "save_curb_map",
    "load_curb_map",
]

CURB_MAP_FORMAT = "curbloc-curbmap"
CURB_MAP_VERSION = 1


class TemporalAnchoringError(ValueError):
    """No base-map vertex close enough in time to anchor an observation."""


@dataclass
class CurbMap:
    """Compressed curb map plus the raw map-frame clouds it was built from."""

    segments: list[CurbSegment]
    raw_by_vertex: dict[int, PointCloud3] = field(default_factory=dict)
    total_raw_points: int = 0

    @property
    def stored_points(self) -> int:
        return stored_point_count(self.segments)

    @property
    def compression_ratio(self) -> float:
        """Stored points over raw points; below 1 means the map shrank."""
        if self.total_raw_points == 0:
            return float("nan")
        return self.stored_points / self.total_raw_points


def associate_observation(base_map: BaseMap, cloud: PointCloud3, timestamp: int,
                          max_time_gap: int = 100_000_000) -> int:
    """Anchor a body-frame curb detection to the base-map vertex nearest in
    time.  ``timestamp`` and ``max_time_gap`` are in nanoseconds.

    Returns the chosen vertex id.  Ties go to the earlier vertex.
    """
    if len(base_map) == 0:
        raise TemporalAnchoringError("base map has no vertices")
    stamps = base_map.timestamps()
    gaps = np.abs(stamps - int(timestamp))
    best = int(np.argmin(gaps))  # argmin takes the first minimum, so ties go earlier
    if gaps[best] > max_time_gap:
        raise TemporalAnchoringError(
            f"nearest vertex is {gaps[best]} ns away, above the {max_time_gap} ns limit"
        )
    vertex = base_map.vertices[best]
    base_map.set_observation(vertex.id, cloud)
    return vertex.id


def build_curb_map(base_map: BaseMap, cfg: FitConfig = FitConfig()) -> CurbMap:
    """Transform every anchored observation into the map frame and compress.

    Raises ValueError when no vertex carries an observation: an empty curb
    map would silently disable localization downstream.
    """
    raw_by_vertex: dict[int, PointCloud3] = {}
    chunks = []
    for vertex in base_map.vertices:
        obs = vertex.curb_observation
        if obs is None or len(obs) == 0:
            continue
        in_map = apply(vertex.T_MB, obs)
        raw_by_vertex[vertex.id] = in_map
        chunks.append(in_map.points)
    if not chunks:
        raise ValueError("no curb observations anchored to the base map")
    merged = PointCloud3(np.concatenate(chunks, axis=0), frame="map")
    segments = parameterize_cloud(merged, cfg)
    return CurbMap(segments=segments, raw_by_vertex=raw_by_vertex,
                   total_raw_points=len(merged))


def merge_sessions(a: BaseMap, b: BaseMap) -> BaseMap:
    """Union of two recording sessions into one base map.

    Vertices are kept as-is (no cross-session alignment happens here); the
    caller rebuilds the curb map afterwards so compression runs over the
    union.  Session ids must not collide, otherwise the per-session
    ordering guarantees would be meaningless.
    """
    shared = set(a.sessions) & set(b.sessions)
    if shared:
        raise ValueError(f"session ids {sorted(shared)} appear in both maps")
    merged = BaseMap()
    for vertex in a.vertices:
        merged.append(vertex)
    for vertex in b.vertices:
        merged.append(vertex)
    return merged


def save_curb_map(curb_map: CurbMap, path) -> None:
    """Versioned text format; per segment the kind, goodness, bounding box,
    and either the knots plus control points or the raw points."""
    lines = [f"# {CURB_MAP_FORMAT} v{CURB_MAP_VERSION}",
             f"# segments {len(curb_map.segments)} raw_points {curb_map.total_raw_points}"]
    for i, seg in enumerate(curb_map.segments):
        if seg.kind == "spline":
            head = f"# segment {i} spline gs {seg.goodness:.17g} count {len(seg.control_points)}"
        else:
            head = (f"# segment {i} raw gs {seg.goodness:.17g} count {len(seg.raw_points)}"
                    f" reason {seg.fallback_reason or 'unspecified'}")
        lines.append(head)
        bb = np.concatenate([seg.bounding_min, seg.bounding_max])
        lines.append("# bbox " + " ".join(f"{v:.17g}" for v in bb))
        if seg.kind == "spline":
            lines.append("# knots " + " ".join(f"{v:.17g}" for v in seg.knots))
            pts = seg.control_points
        else:
            pts = seg.raw_points.points
        for p in pts:
            lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_curb_map(path) -> CurbMap:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty curb-map file")
    head = lines[0].lstrip("# ").split()
    if len(head) < 2 or head[0] != CURB_MAP_FORMAT:
        raise ValueError(f"{path}: not a {CURB_MAP_FORMAT} file")
    if head[1] != f"v{CURB_MAP_VERSION}":
        raise ValueError(f"{path}: unsupported version {head[1]}")
    counts = lines[1].split()
    total_raw = int(counts[counts.index("raw_points") + 1])

    segments: list[CurbSegment] = []
    i = 2
    while i < len(lines):
        parts = lines[i].split()
        if parts[:2] != ["#", "segment"]:
            raise ValueError(f"{path}: expected segment header at line {i + 1}")
        kind = parts[3]
        gs = float(parts[parts.index("gs") + 1])
        count = int(parts[parts.index("count") + 1])
        reason = None
        if "reason" in parts:
            reason = parts[parts.index("reason") + 1]
            if reason == "unspecified":
                reason = None
        bbox_parts = lines[i + 1].split()
        if bbox_parts[:2] != ["#", "bbox"]:
            raise ValueError(f"{path}: expected bbox after segment header")
        bb = np.array([float(v) for v in bbox_parts[2:]])
        i += 2
        knots = None
        if kind == "spline":
            knot_parts = lines[i].split()
            if knot_parts[:2] != ["#", "knots"]:
                raise ValueError(f"{path}: expected knots for spline segment")
            knots = np.array([float(v) for v in knot_parts[2:]])
            i += 1
        pts = np.array([[float(v) for v in lines[i + k].split()] for k in range(count)])
        i += count
        if kind == "spline":
            segments.append(CurbSegment(
                kind="spline", goodness=gs,
                bounding_min=bb[:3], bounding_max=bb[3:],
                control_points=pts, knots=knots,
            ))
        else:
            segments.append(CurbSegment(
                kind="raw", goodness=gs,
                bounding_min=bb[:3], bounding_max=bb[3:],
                raw_points=PointCloud3(pts, frame="map"),
                fallback_reason=reason,
            ))
    return CurbMap(segments=segments, raw_by_vertex={}, total_raw_points=total_raw)
