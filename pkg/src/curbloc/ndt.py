"""Normal-distributions-transform registration with a likelihood score.

The reference cloud is voxelized into per-cell Gaussians; alignment then
maximizes the summed likelihood of the transformed input points under the
cell Gaussians by damped Newton steps over 6-DoF.  During optimization
each point is scored against its own voxel and the 26 neighbors: the
extra terms are Gaussian tails that vanish within a cell or two, but they
keep the objective continuous when a point drifts across a voxel border.
With hard single-cell membership those border crossings step the
objective by a whole point weight, which buries the shallow along-curb
gradient and stalls the solver wherever the scene is close to straight.

The mean per-point likelihood of the final alignment (own cell only,
empty cells scoring zero) doubles as a matching score in [0, 1] that
downstream sanity checks compare against a threshold.

Only steps that decrease the objective are accepted, so an accepted
iterate can never be less likely than the initial guess.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, PointCloud3, matrix_to_quat
from .lie import so3_exp

__all__ = [
    "NdtConfig",
    "NdtGrid",
    "RegistrationResult",
    "DegenerateReferenceError",
    "RegistrationNumericalError",
    "build_grid",
    "remove_outliers",
    "register",
    "register_with_grid",
    "matching_score",
]

# Cell indices are packed three-per-int64; this offset keeps them positive.
_KEY_OFFSET = 1 << 20
_KEY_BITS = 21


class DegenerateReferenceError(ValueError):
    """Reference cloud too sparse to form a single NDT cell."""


class RegistrationNumericalError(RuntimeError):
    """Objective or update turned non-finite."""


@dataclass(frozen=True)
class NdtConfig:
    """Registration knobs.

    The cell size and the relative covariance floor together set the
    capture basin: a thin curb line inside a cell gets a cross-track
    standard deviation of about sqrt(eps_reg / 12) * cell_size, and pulls
    from perturbations up to a few of those.  The defaults give roughly
    0.22 m, wide enough to recover meter-scale priors while still scoring
    tightly enough for the sanity check to reject clutter.
    """

    cell_size: float = 2.0
    min_cell_points: int = 5
    eps_reg: float = 0.15
    max_iters: int = 50
    conv_tol: float = 1e-4
    damping_init: float = 1e-3
    damping_max: float = 1e7
    cond_max: float = 1e6
    rot_scale: float = 10.0  # meters of update norm per radian of rotation


class NdtGrid:
    """Immutable voxel grid of Gaussians fitted to a reference cloud."""

    def __init__(self, cell_size: float, packed_keys: np.ndarray, means: np.ndarray,
                 covariances: np.ndarray, inv_covariances: np.ndarray,
                 counts: np.ndarray, frame: str):
        self.cell_size = cell_size
        self._keys = packed_keys  # sorted, unique
        self.means = means
        self.covariances = covariances
        self._inv_covs = inv_covariances
        self.counts = counts
        self.frame = frame
        for arr in (self._keys, self.means, self.covariances, self._inv_covs, self.counts):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self._keys)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Cell index per point, -1 where the containing voxel is empty."""
        packed = _pack(np.floor(points / self.cell_size).astype(np.int64))
        return self._find(packed)

    def lookup_neighborhood(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(point index, cell index) pairs over each point's 3x3x3 voxel
        neighborhood, keeping only occupied cells."""
        packed = _pack(np.floor(points / self.cell_size).astype(np.int64))
        pt_idx = np.arange(len(points))
        pts_out = []
        cells_out = []
        for delta in _STENCIL:
            pos = self._find(packed + delta)
            hit = pos >= 0
            pts_out.append(pt_idx[hit])
            cells_out.append(pos[hit])
        return np.concatenate(pts_out), np.concatenate(cells_out)

    def _find(self, packed: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self._keys, packed)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == packed
        return np.where(hit, pos, -1)


def _pack(keys: np.ndarray) -> np.ndarray:
    shifted = keys + _KEY_OFFSET
    if np.any((shifted <= 0) | (shifted >= (1 << _KEY_BITS) - 1)):
        raise ValueError("point coordinates exceed the supported grid extent")
    return (shifted[:, 0] << (2 * _KEY_BITS)) | (shifted[:, 1] << _KEY_BITS) | shifted[:, 2]


# Packed-key deltas of the 27-cell neighborhood; valid because _pack keeps
# one spare index at each end of every axis.
_STENCIL = np.array([
    (dx << (2 * _KEY_BITS)) + (dy << _KEY_BITS) + dz
    for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
], dtype=np.int64)


def build_grid(reference: PointCloud3, cell_size: float = 2.0,
               min_cell_points: int = 5, eps_reg: float = 0.15) -> NdtGrid:
    """Fit one Gaussian per voxel that holds at least ``min_cell_points``.

    Covariance eigenvalues are floored at ``eps_reg`` times the largest
    eigenvalue; a cell with zero sample covariance becomes eps_reg-scaled
    isotropic so its inverse exists.
    """
    pts = reference.points
    if len(pts) == 0:
        raise DegenerateReferenceError("reference cloud is empty")
    packed = _pack(np.floor(pts / cell_size).astype(np.int64))
    uniq, inverse = np.unique(packed, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq))
    keep = counts >= min_cell_points
    if not np.any(keep):
        raise DegenerateReferenceError(
            f"no voxel holds {min_cell_points} points at cell size {cell_size}"
        )
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse, pts)
    means_all = sums / counts[:, None]
    centered = pts - means_all[inverse]
    m2 = np.zeros((len(uniq), 3, 3))
    np.add.at(m2, inverse, centered[:, :, None] * centered[:, None, :])
    covs_all = m2 / counts[:, None, None]

    keys = uniq[keep]
    means = means_all[keep]
    covs = covs_all[keep]
    counts = counts[keep]

    eigvals, eigvecs = np.linalg.eigh(covs)
    largest = eigvals[:, -1]
    floored = np.maximum(eigvals, eps_reg * largest[:, None])
    degenerate = largest < 1e-12
    floored[degenerate] = eps_reg
    covs = np.einsum("nij,nj,nkj->nik", eigvecs, floored, eigvecs)
    inv_covs = np.einsum("nij,nj,nkj->nik", eigvecs, 1.0 / floored, eigvecs)
    return NdtGrid(cell_size, keys, means, covs, inv_covs, counts.astype(np.int64),
                   reference.frame)


def remove_outliers(input_cloud: PointCloud3, reference: PointCloud3,
                    ratio: float) -> tuple[PointCloud3, PointCloud3]:
    """Drop from each cloud the ceil(ratio * n) points farthest from the
    other cloud, by nearest-neighbor distance.  Artifacts present in only
    one of the clouds would otherwise bias the alignment.
    """
    if not 0.0 <= ratio < 0.5:
        raise ValueError(f"outlier ratio must be in [0, 0.5), got {ratio}")
    if ratio == 0.0 or len(input_cloud) == 0 or len(reference) == 0:
        return input_cloud, reference

    def trim(cloud: PointCloud3, other: PointCloud3) -> PointCloud3:
        n = len(cloud)
        n_drop = int(np.ceil(ratio * n))
        if n_drop == 0:
            return cloud
        dists, _ = cKDTree(other.points).query(cloud.points)
        worst = np.argsort(-dists, kind="stable")[:n_drop]
        keep = np.ones(n, dtype=bool)
        keep[worst] = False
        return PointCloud3(cloud.points[keep], cloud.frame)

    return trim(input_cloud, reference), trim(reference, input_cloud)


def _likelihoods(points: np.ndarray, grid: NdtGrid):
    """Per-point likelihood exp(-0.5 * Mahalanobis^2); zero in empty cells.

    Also returns the pieces the Newton step needs: residuals to the cell
    means, whitened residuals, and the cell index per point.
    """
    idx = grid.lookup(points)
    valid = idx >= 0
    f = np.zeros(len(points))
    d = points[valid] - grid.means[idx[valid]]
    q = np.einsum("nij,nj->ni", grid._inv_covs[idx[valid]], d)
    m2 = np.einsum("ni,ni->n", d, q)
    f[valid] = np.exp(-0.5 * np.minimum(m2, 700.0))
    return f, valid, d, q, idx


def matching_score(aligned_input: PointCloud3, grid: NdtGrid) -> float:
    """Mean per-point likelihood of the (already aligned) input cloud."""
    if len(aligned_input) == 0:
        raise ValueError("matching score needs a non-empty cloud")
    f, _, _, _, _ = _likelihoods(aligned_input.points, grid)
    return float(f.mean())


@dataclass(frozen=True)
class RegistrationResult:
    """Alignment plus the evidence needed to weigh it.

    The Hessian of the objective at the final pose doubles as an
    information matrix: its soft directions are the ones the scene could
    not pin down (a straight curb says nothing about sliding along it),
    so downstream fusion can deweight exactly those axes.  Rotation rows
    refer to a pivot near the scene centroid, not the map origin.
    """

    T_align: Pose
    score: float
    iterations: int
    converged: bool
    hessian: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def _objective_and_derivatives(points: np.ndarray, rot: np.ndarray, trans: np.ndarray,
                               grid: NdtGrid, with_derivatives: bool):
    moved = points @ rot.T + trans
    pt_idx, cell_idx = grid.lookup_neighborhood(moved)
    n_valid = int(np.count_nonzero(np.bincount(pt_idx, minlength=len(points))))
    if n_valid == 0:
        empty = (np.zeros(6), np.zeros((6, 6))) if with_derivatives else (None, None)
        return 0.0, empty[0], empty[1], 0
    mv = moved[pt_idx]
    ic = grid._inv_covs[cell_idx]
    d = mv - grid.means[cell_idx]
    q = np.einsum("nij,nj->ni", ic, d)
    m2 = np.einsum("ni,ni->n", d, q)
    f = np.exp(-0.5 * np.minimum(m2, 700.0))
    objective = -float(f.sum())
    if not with_derivatives:
        return objective, None, None, n_valid
    # Left perturbation x' = exp(hat(w)) (R x + t) + dt gives per-pair
    # Jacobian J = [I | -hat(x')], so J^T S^-1 d stacks to [q | x' x q].
    a = np.concatenate([q, np.cross(mv, q)], axis=1)  # (pairs, 6)
    grad = np.einsum("n,ni->i", f, a)
    # Curvature model: sum f (J^T S^-1 J - a a^T), assembled blockwise from
    # S^-1 and S^-1 hat(x').  The second derivative of the rotated point
    # w.r.t the axis-angle increment is dropped; that term carries a factor
    # of the residual, so it fades exactly where the Hessian matters, and
    # the damping plus the strict-decrease gate absorb it elsewhere.
    hx = _hat_batch(mv)
    ic_hx = np.einsum("nij,njk->nik", ic, hx)
    hess = np.empty((6, 6))
    hess[:3, :3] = np.einsum("n,nij->ij", f, ic)
    hess[:3, 3:] = -np.einsum("n,nij->ij", f, ic_hx)
    hess[3:, :3] = hess[:3, 3:].T
    hess[3:, 3:] = -np.einsum("n,nij,njk->ik", f, hx, ic_hx)
    hess -= np.einsum("n,ni,nj->ij", f, a, a)
    return objective, grad, hess, n_valid


def _hat_batch(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def register_with_grid(input_cloud: PointCloud3, grid: NdtGrid, guess: Pose,
                       cfg: NdtConfig = NdtConfig()) -> RegistrationResult:
    """Damped Newton maximization of the NDT likelihood, starting at guess.

    The returned transform maps the input cloud onto the reference:
    apply(T_align, input) lines up with the cloud the grid was built from.
    Condition number of the final Hessian above cfg.cond_max marks the
    result unconverged; a straight-line scene slides freely along itself
    and must be caught by the score gate downstream, not trusted here.
    """
    if len(input_cloud) == 0:
        raise ValueError("input cloud is empty")
    if input_cloud.frame != grid.frame:
        raise ValueError(f"input frame {input_cloud.frame!r} != grid frame {grid.frame!r}")
    pts = input_cloud.points
    rot = guess.rotation_matrix.copy()
    trans = guess.translation.copy()

    objective, grad, hess, n_valid = _objective_and_derivatives(pts, rot, trans, grid, True)
    if not np.isfinite(objective):
        raise RegistrationNumericalError("objective non-finite at the initial guess")
    if n_valid == 0:
        return RegistrationResult(guess, 0.0, 0, False)

    damping = cfg.damping_init
    converged = False
    iterations = 0
    final_hess = hess
    for iterations in range(1, cfg.max_iters + 1):
        stepped = False
        while damping <= cfg.damping_max:
            try:
                delta = np.linalg.solve(hess + damping * np.eye(6), -grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                raise RegistrationNumericalError("update turned non-finite")
            d_trans, d_rot = delta[:3], delta[3:]
            rot_step = so3_exp(d_rot)
            new_rot = rot_step @ rot
            new_trans = rot_step @ trans + d_trans
            new_objective, _, _, _ = _objective_and_derivatives(pts, new_rot, new_trans,
                                                                grid, False)
            if not np.isfinite(new_objective):
                raise RegistrationNumericalError("objective turned non-finite")
            if new_objective < objective:
                rot, trans, objective = new_rot, new_trans, new_objective
                damping = max(damping * 0.1, 1e-12)
                stepped = True
                break
            damping *= 10.0
        if not stepped:
            # No step decreases the objective even under heavy damping:
            # the guess already sits at a local optimum at our resolution.
            converged = True
            break
        update_norm = float(np.linalg.norm(delta[:3]) + cfg.rot_scale * np.linalg.norm(delta[3:]))
        objective, grad, hess, n_valid = _objective_and_derivatives(pts, rot, trans, grid, True)
        final_hess = hess
        if n_valid == 0:
            converged = False
            break
        if update_norm < cfg.conv_tol:
            converged = True
            break

    if converged and np.linalg.cond(final_hess) > cfg.cond_max:
        converged = False

    # Re-orthonormalize through the quaternion before building the pose.
    quat = matrix_to_quat(rot)
    T_align = Pose(quat, trans, parent_frame=input_cloud.frame, child_frame=input_cloud.frame)
    aligned = PointCloud3(pts @ T_align.rotation_matrix.T + T_align.translation,
                          input_cloud.frame)
    score = matching_score(aligned, grid)
    return RegistrationResult(T_align, score, iterations, converged, final_hess)


def register(input_cloud: PointCloud3, reference: PointCloud3, guess: Pose,
             cfg: NdtConfig = NdtConfig()) -> RegistrationResult:
    """Align the input onto the reference cloud.

    Both clouds are shifted near the reference centroid internally so the
    rotation update pivots about the scene, not the map origin; far from
    the origin the lever arm would otherwise swamp the Hessian.  The shift
    is snapped to a whole number of cells so the voxel partition is never
    re-cut, only relabeled (a cut through the centroid would split dense
    cells at their peak and distort the per-cell Gaussians).  The returned
    transform is in the original coordinates.
    """
    if input_cloud.frame != reference.frame:
        raise ValueError(
            f"clouds disagree on frame: {input_cloud.frame!r} vs {reference.frame!r}"
        )
    if len(reference) == 0:
        raise DegenerateReferenceError("reference cloud is empty")
    center = cfg.cell_size * np.round(reference.points.mean(axis=0) / cfg.cell_size)
    ref_c = PointCloud3(reference.points - center, reference.frame)
    shifted = PointCloud3(input_cloud.points - center, input_cloud.frame)
    Rg = guess.rotation_matrix
    inner_guess = Pose.from_matrix(Rg, guess.translation + Rg @ center - center,
                                   guess.parent_frame, guess.child_frame)
    grid = build_grid(ref_c, cfg.cell_size, cfg.min_cell_points, cfg.eps_reg)
    res = register_with_grid(shifted, grid, inner_guess, cfg)
    Ra = res.T_align.rotation_matrix
    T = Pose.from_matrix(Ra, res.T_align.translation + center - Ra @ center,
                         input_cloud.frame, input_cloud.frame)
    return RegistrationResult(T, res.score, res.iterations, res.converged, res.hessian)
