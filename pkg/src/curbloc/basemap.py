"""Pose-graph base map: timestamped vehicle poses that anchor curb data.

The base map is produced upstream by a visual mapping pipeline and consumed
here as given.  Each vertex stores the map-to-body transform at its
timestamp and, optionally, the curb observation (body frame) allocated to
it during map extension.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud_io import load_cloud, save_cloud_csv
from .geometry import PointCloud3, Pose

__all__ = ["BaseMapVertex", "BaseMap", "save_base_map", "load_base_map"]

BASE_MAP_FORMAT = "curbloc-basemap"
BASE_MAP_VERSION = 1


@dataclass(frozen=True)
class BaseMapVertex:
    id: int
    timestamp: int  # nanoseconds
    T_MB: Pose  # map -> body at this vertex
    curb_observation: Optional[PointCloud3] = None  # body frame
    session_id: int = 0

    def with_observation(self, obs: PointCloud3) -> "BaseMapVertex":
        return replace(self, curb_observation=obs)


class BaseMap:
    """Ordered collection of :class:`BaseMapVertex` with unique ids.

    Timestamps must strictly increase with id within each session.
    """

    def __init__(self, vertices=()):
        self._vertices: list[BaseMapVertex] = []
        self._by_id: dict[int, int] = {}
        for v in vertices:
            self.append(v)

    def append(self, v: BaseMapVertex) -> None:
        if v.id in self._by_id:
            raise ValueError(f"duplicate vertex id {v.id}")
        prev = self._last_in_session(v.session_id)
        if prev is not None and (v.id <= prev.id or v.timestamp <= prev.timestamp):
            raise ValueError(
                f"vertex {v.id} violates per-session monotonicity "
                f"(previous id {prev.id} at {prev.timestamp} ns)"
            )
        self._by_id[v.id] = len(self._vertices)
        self._vertices.append(v)

    def _last_in_session(self, session_id: int) -> Optional[BaseMapVertex]:
        for v in reversed(self._vertices):
            if v.session_id == session_id:
                return v
        return None

    @property
    def vertices(self) -> list[BaseMapVertex]:
        return list(self._vertices)

    @property
    def sessions(self) -> list[int]:
        seen = []
        for v in self._vertices:
            if v.session_id not in seen:
                seen.append(v.session_id)
        return seen

    def __len__(self) -> int:
        return len(self._vertices)

    def __iter__(self):
        return iter(self._vertices)

    def get(self, vertex_id: int) -> BaseMapVertex:
        return self._vertices[self._by_id[vertex_id]]

    def set_observation(self, vertex_id: int, obs: PointCloud3) -> None:
        idx = self._by_id[vertex_id]
        self._vertices[idx] = self._vertices[idx].with_observation(obs)

    def timestamps(self) -> np.ndarray:
        return np.array([v.timestamp for v in self._vertices], dtype=np.int64)

    def positions(self) -> np.ndarray:
        """(n, 3) body origins in the map frame."""
        return np.array([v.T_MB.translation for v in self._vertices])


def save_base_map(base_map: BaseMap, path, cloud_dir: str = "clouds") -> None:
    """Write the versioned base-map text file.

    Curb observations are written as CSV clouds in ``cloud_dir`` next to the
    map file and referenced by relative path.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"{BASE_MAP_FORMAT} v{BASE_MAP_VERSION}\n")
        fh.write("# vertex <id> <timestamp_ns> <session> <qw> <qx> <qy> <qz> <x> <y> <z> [cloud_ref]\n")
        for v in base_map:
            q = v.T_MB.rotation
            t = v.T_MB.translation
            line = (
                f"vertex {v.id} {v.timestamp} {v.session_id} "
                f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} "
                f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g}"
            )
            if v.curb_observation is not None:
                ref = f"{cloud_dir}/{v.id:06d}.csv"
                save_cloud_csv(v.curb_observation, path.parent / ref)
                line += f" {ref}"
            fh.write(line + "\n")


def load_base_map(path, map_frame: str = "map", body_frame: str = "body") -> BaseMap:
    path = Path(path)
    vertices = []
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != BASE_MAP_FORMAT:
            raise ValueError(f"{path}: not a {BASE_MAP_FORMAT} file")
        if header[1] != f"v{BASE_MAP_VERSION}":
            raise ValueError(f"{path}: unsupported version {header[1]}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if tokens[0] != "vertex" or len(tokens) not in (11, 12):
                raise ValueError(f"{path}:{lineno}: malformed vertex record")
            vid, ts, session = int(tokens[1]), int(tokens[2]), int(tokens[3])
            q = np.array([float(x) for x in tokens[4:8]])
            t = np.array([float(x) for x in tokens[8:11]])
            obs = None
            if len(tokens) == 12:
                obs = load_cloud(path.parent / tokens[11], frame=body_frame)
            vertices.append(
                BaseMapVertex(vid, ts, Pose(q, t, map_frame, body_frame), obs, session)
            )
    return BaseMap(vertices)
