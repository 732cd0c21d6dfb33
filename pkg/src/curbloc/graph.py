"""Windowed pose-graph fusion of odometry steps and absolute pose fixes.

Vertices carry full 6-DoF poses; odometry edges chain consecutive
vertices, absolute edges pin single vertices to measured poses.  Both
residuals are expressed in the measurement's body frame so a diagonal
covariance means lateral/longitudinal/vertical, not map axes.

Optimization is Gauss-Newton with local (right) perturbations and a
backtracking line search, run over a trailing window with the oldest
in-window vertex held fixed as the gauge.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, compose, matrix_to_quat
from .lie import hat, jr_inv, so3_exp, so3_log

__all__ = [
    "GraphVertex",
    "OdometryEdge",
    "AbsoluteEdge",
    "PoseGraph",
    "PoseGraphNumericalError",
    "save_trajectory",
    "load_trajectory",
]

log = logging.getLogger(__name__)


class PoseGraphNumericalError(RuntimeError):
    """Non-finite residual or update; estimates were left unchanged."""


@dataclass
class GraphVertex:
    id: int
    timestamp: int
    estimate: Pose
    fixed: bool = False
    localized: bool = False


@dataclass(frozen=True)
class OdometryEdge:
    from_id: int
    to_id: int
    relative: Pose  # body frame at from-vertex to body frame at to-vertex
    covariance: np.ndarray  # 6x6, (x, y, z, roll, pitch, yaw)

    def __post_init__(self):
        if self.to_id <= self.from_id:
            raise ValueError("odometry must advance vertex ids")
        _check_covariance(self.covariance)


@dataclass(frozen=True)
class AbsoluteEdge:
    vertex_id: int
    measured: Pose
    covariance: np.ndarray
    source: str = "curb"  # "curb" | "external"

    def __post_init__(self):
        _check_covariance(self.covariance)


def _check_covariance(cov) -> None:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (6, 6):
        raise ValueError(f"covariance must be 6x6, got {cov.shape}")
    eigvals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    if eigvals[0] <= 0.0:
        raise ValueError("covariance must be positive-definite")


class PoseGraph:
    def __init__(self, initial: Pose, timestamp: int = 0, window: int = 50):
        if window < 2:
            raise ValueError("window must cover at least 2 vertices")
        self.window = window
        self._vertices: list[GraphVertex] = [GraphVertex(0, timestamp, initial)]
        self._odometry: list[OdometryEdge] = []
        self._absolute: list[AbsoluteEdge] = []

    def __len__(self) -> int:
        return len(self._vertices)

    @property
    def vertices(self) -> list[GraphVertex]:
        return self._vertices

    def vertex(self, vertex_id: int) -> GraphVertex:
        v = self._vertices[vertex_id]
        assert v.id == vertex_id  # ids are dense by construction
        return v

    def latest(self) -> GraphVertex:
        return self._vertices[-1]

    def add_odometry(self, edge: OdometryEdge, timestamp: int | None = None) -> int:
        """Append a vertex at the dead-reckoned pose implied by the edge."""
        last = self._vertices[-1]
        if edge.from_id != last.id:
            raise ValueError(
                f"odometry must leave the latest vertex {last.id}, got {edge.from_id}"
            )
        if edge.to_id != last.id + 1:
            raise ValueError("odometry must create the next consecutive vertex")
        if timestamp is None:
            timestamp = last.timestamp + 1
        if timestamp <= last.timestamp:
            raise ValueError("vertex timestamps must strictly increase")
        estimate = compose(last.estimate, edge.relative)
        self._vertices.append(GraphVertex(edge.to_id, timestamp, estimate))
        self._odometry.append(edge)
        return edge.to_id

    def _window_ids(self) -> list[int]:
        return [v.id for v in self._vertices[-self.window:]]

    def add_constraint(self, edge: AbsoluteEdge) -> bool:
        """Attach an absolute fix; returns False when the vertex already
        slid out of the optimization window (the fix would never be used)."""
        if not 0 <= edge.vertex_id < len(self._vertices):
            raise ValueError(f"unknown vertex {edge.vertex_id}")
        if edge.vertex_id not in self._window_ids():
            log.warning("dropping constraint for vertex %d outside the window",
                        edge.vertex_id)
            return False
        self._absolute.append(edge)
        self.vertex(edge.vertex_id).localized = True
        return True

    def optimize(self, window: int | None = None, max_iters: int = 20,
                 conv_tol: float = 1e-6) -> float:
        """Gauss-Newton over the trailing window. Returns the final total
        weighted squared residual.  Estimates are untouched if anything
        turns non-finite."""
        win = self.window if window is None else window
        if win < 2:
            raise ValueError("window must cover at least 2 vertices")
        in_window = [v.id for v in self._vertices[-win:]]
        free = [i for i in in_window[1:] if not self.vertex(i).fixed]
        snapshot = {v.id: v.estimate for v in self._vertices}
        try:
            return self._optimize_inner(set(in_window), free, max_iters, conv_tol)
        except PoseGraphNumericalError:
            for v in self._vertices:
                v.estimate = snapshot[v.id]
            raise

    # -- internals ---------------------------------------------------------

    def _active_edges(self, in_window: set[int]):
        odo = [e for e in self._odometry
               if e.from_id in in_window and e.to_id in in_window]
        ab = [e for e in self._absolute if e.vertex_id in in_window]
        return odo, ab

    def _optimize_inner(self, in_window: set[int], free: list[int],
                        max_iters: int, conv_tol: float) -> float:
        odo, ab = self._active_edges(in_window)
        col = {vid: 6 * k for k, vid in enumerate(free)}
        n = 6 * len(free)
        chi2 = self._chi2(odo, ab)
        if not np.isfinite(chi2):
            raise PoseGraphNumericalError("non-finite residual before optimization")
        if n == 0:
            return chi2

        for _ in range(max_iters):
            H = np.zeros((n, n))
            b = np.zeros(n)
            for e in odo:
                r, Ji, Jj = self._odometry_residual(e, with_jacobians=True)
                info = np.linalg.inv(e.covariance)
                blocks = []
                if e.from_id in col:
                    blocks.append((col[e.from_id], Ji))
                if e.to_id in col:
                    blocks.append((col[e.to_id], Jj))
                _accumulate(H, b, r, info, blocks)
            for e in ab:
                if e.vertex_id not in col:
                    continue
                r, J = self._absolute_residual(e, with_jacobians=True)
                info = np.linalg.inv(e.covariance)
                _accumulate(H, b, r, info, [(col[e.vertex_id], J)])
            if not (np.all(np.isfinite(H)) and np.all(np.isfinite(b))):
                raise PoseGraphNumericalError("non-finite normal equations")
            try:
                delta = np.linalg.solve(H, -b)
            except np.linalg.LinAlgError as exc:
                raise PoseGraphNumericalError(f"singular system: {exc}") from exc

            # Backtrack until the step does not increase the objective.
            saved = {vid: self.vertex(vid).estimate for vid in free}
            alpha, stepped = 1.0, False
            while alpha > 1e-4:
                self._apply_step(free, col, alpha * delta)
                new_chi2 = self._chi2(odo, ab)
                if not np.isfinite(new_chi2):
                    raise PoseGraphNumericalError("non-finite residual after step")
                if new_chi2 <= chi2 + 1e-12:
                    chi2 = new_chi2
                    stepped = True
                    break
                for vid in free:
                    self.vertex(vid).estimate = saved[vid]
                alpha *= 0.5
            if not stepped:
                break
            if alpha * float(np.linalg.norm(delta)) < conv_tol:
                break
        return chi2

    def _apply_step(self, free: list[int], col: dict[int, int], delta: np.ndarray) -> None:
        for vid in free:
            k = col[vid]
            rho, phi = delta[k:k + 3], delta[k + 3:k + 6]
            v = self.vertex(vid)
            R = v.estimate.rotation_matrix
            new_R = R @ so3_exp(phi)
            new_t = v.estimate.translation + R @ rho
            v.estimate = Pose(matrix_to_quat(new_R), new_t,
                              v.estimate.parent_frame, v.estimate.child_frame)

    def _chi2(self, odo, ab) -> float:
        total = 0.0
        for e in odo:
            r, _, _ = self._odometry_residual(e, with_jacobians=False)
            total += float(r @ np.linalg.inv(e.covariance) @ r)
        for e in ab:
            r, _ = self._absolute_residual(e, with_jacobians=False)
            total += float(r @ np.linalg.inv(e.covariance) @ r)
        return total

    def _odometry_residual(self, e: OdometryEdge, with_jacobians: bool):
        vi, vj = self.vertex(e.from_id), self.vertex(e.to_id)
        Ri, Rj = vi.estimate.rotation_matrix, vj.estimate.rotation_matrix
        ti, tj = vi.estimate.translation, vj.estimate.translation
        Rz, tz = e.relative.rotation_matrix, e.relative.translation
        local = Ri.T @ (tj - ti)
        r_t = local - tz
        r_R = so3_log(Rz.T @ Ri.T @ Rj)
        r = np.concatenate([r_t, r_R])
        if not with_jacobians:
            return r, None, None
        Jri = jr_inv(r_R)
        Ji = np.zeros((6, 6))
        Ji[:3, :3] = -np.eye(3)
        Ji[:3, 3:] = hat(local)
        Ji[3:, 3:] = -Jri @ (Rj.T @ Ri)
        Jj = np.zeros((6, 6))
        Jj[:3, :3] = Ri.T @ Rj
        Jj[3:, 3:] = Jri
        return r, Ji, Jj

    def _absolute_residual(self, e: AbsoluteEdge, with_jacobians: bool):
        v = self.vertex(e.vertex_id)
        Ri, ti = v.estimate.rotation_matrix, v.estimate.translation
        Rz, tz = e.measured.rotation_matrix, e.measured.translation
        r_t = Rz.T @ (ti - tz)
        r_R = so3_log(Rz.T @ Ri)
        r = np.concatenate([r_t, r_R])
        if not with_jacobians:
            return r, None
        J = np.zeros((6, 6))
        J[:3, :3] = Rz.T @ Ri
        J[3:, 3:] = jr_inv(r_R)
        return r, J


def _accumulate(H: np.ndarray, b: np.ndarray, r: np.ndarray, info: np.ndarray,
                blocks: list[tuple[int, np.ndarray]]) -> None:
    for ca, Ja in blocks:
        b[ca:ca + 6] += Ja.T @ info @ r
        for cb, Jb in blocks:
            H[ca:ca + 6, cb:cb + 6] += Ja.T @ info @ Jb


def save_trajectory(vertices: list[GraphVertex], path) -> None:
    """CSV rows: timestamp, position, orientation quaternion, localized flag."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "x", "y", "z", "qw", "qx", "qy", "qz", "localized"])
        for v in vertices:
            t = v.estimate.translation
            q = v.estimate.rotation
            writer.writerow([v.timestamp,
                             *(f"{c:.17g}" for c in t), *(f"{c:.17g}" for c in q),
                             int(v.localized)])


def load_trajectory(path) -> list[GraphVertex]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["timestamp", "x"]:
            raise ValueError(f"{path}: not a trajectory CSV")
        for i, row in enumerate(reader):
            stamp = int(row[0])
            t = np.array([float(v) for v in row[1:4]])
            q = np.array([float(v) for v in row[4:8]])
            out.append(GraphVertex(i, stamp, Pose(q, t), localized=bool(int(row[8]))))
    return out
