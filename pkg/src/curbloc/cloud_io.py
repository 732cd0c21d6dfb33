"""Point-cloud file ingestion: CSV (x,y,z rows) and ASCII PLY."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import PointCloud3

__all__ = ["load_cloud", "load_cloud_csv", "load_cloud_ply", "save_cloud_csv"]


def load_cloud_csv(path, frame: str = "body") -> PointCloud3:
    """Read one ``x,y,z`` row per point; a non-numeric first row is a header."""
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                rows.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except (ValueError, IndexError):
                if lineno == 0:
                    continue  # header row
                raise ValueError(f"{path}:{lineno + 1}: cannot parse point row {line!r}")
    return PointCloud3(np.array(rows).reshape(-1, 3), frame)


def load_cloud_ply(path, frame: str = "body") -> PointCloud3:
    """Read an ASCII PLY file with x/y/z vertex properties."""
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if header != "ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = fh.readline().split()
        if len(fmt) < 2 or fmt[0] != "format" or fmt[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        n_vertices = None
        props = []
        in_vertex_element = False
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "element":
                in_vertex_element = tokens[1] == "vertex"
                if in_vertex_element:
                    n_vertices = int(tokens[2])
            elif tokens[0] == "property" and in_vertex_element:
                props.append(tokens[-1])
            elif tokens[0] == "end_header":
                break
        if n_vertices is None:
            raise ValueError(f"{path}: no vertex element in header")
        try:
            cols = [props.index(axis) for axis in ("x", "y", "z")]
        except ValueError:
            raise ValueError(f"{path}: vertex element lacks x/y/z properties")
        pts = np.empty((n_vertices, 3))
        for i in range(n_vertices):
            tokens = fh.readline().split()
            pts[i] = [float(tokens[c]) for c in cols]
    return PointCloud3(pts, frame)


def load_cloud(path, frame: str = "body") -> PointCloud3:
    """Dispatch on extension: ``.ply`` or CSV-style text."""
    if str(path).lower().endswith(".ply"):
        return load_cloud_ply(path, frame)
    return load_cloud_csv(path, frame)


def save_cloud_csv(cloud: PointCloud3, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("x,y,z\n")
        for x, y, z in cloud.points:
            fh.write(f"{x:.9g},{y:.9g},{z:.9g}\n")
