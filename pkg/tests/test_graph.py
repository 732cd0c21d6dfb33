"""Pose-graph fusion: residual Jacobians, optimization, windowing, trajectory IO."""

import numpy as np
import pytest

from curbloc.geometry import Pose, compose, matrix_to_quat
from curbloc.graph import (
    AbsoluteEdge,
    GraphVertex,
    OdometryEdge,
    PoseGraph,
    load_trajectory,
    save_trajectory,
)
from curbloc.lie import so3_exp


def mb(q, t):
    return Pose(np.asarray(q, dtype=float), np.asarray(t, dtype=float), "map", "body")


def random_pose(rng, trans_scale=5.0, rot_scale=1.0):
    R = so3_exp(rng.normal(0, rot_scale, 3))
    return Pose(matrix_to_quat(R), rng.normal(0, trans_scale, 3), "map", "body")


def rel_pose(rng, trans_scale=0.5, rot_scale=0.2):
    R = so3_exp(rng.normal(0, rot_scale, 3))
    return Pose(matrix_to_quat(R), rng.normal(0, trans_scale, 3), "body", "body")


def perturbed(pose, delta):
    # same local update the optimizer applies: R exp(phi), t + R rho
    rho, phi = delta[:3], delta[3:]
    R = pose.rotation_matrix
    return Pose(matrix_to_quat(R @ so3_exp(phi)), pose.translation + R @ rho,
                pose.parent_frame, pose.child_frame)


DIAG = np.diag([0.1, 0.1, 0.1, 0.05, 0.05, 0.05]) ** 2


# ------------------------------------------------------------- chain building

class TestChain:
    def test_identity_step_keeps_pose(self):
        g = PoseGraph(mb([1, 0, 0, 0], [1.0, 2.0, 0.0]))
        g.add_odometry(OdometryEdge(0, 1, Pose.identity("body"), DIAG))
        assert len(g) == 2
        np.testing.assert_allclose(g.latest().estimate.translation, [1.0, 2.0, 0.0])
        assert g.latest().timestamp == 1

    def test_forward_steps_accumulate(self):
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        step = Pose([1, 0, 0, 0], [0.5, 0.0, 0.0], "body", "body")
        for k in range(10):
            g.add_odometry(OdometryEdge(k, k + 1, step, DIAG))
        np.testing.assert_allclose(g.latest().estimate.translation, [5.0, 0.0, 0.0],
                                   atol=1e-12)

    def test_arc_matches_planar_oracle(self):
        # 100 equal steps of (10 cm forward, 3.6 deg left) close a full circle;
        # track the same chain with complex-number heading arithmetic
        n, step, dyaw = 100, 0.1, 2 * np.pi / 100
        rel = Pose.from_yaw(dyaw, (step, 0.0, 0.0), "body", "body")
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        for k in range(n):
            g.add_odometry(OdometryEdge(k, k + 1, rel, DIAG))
        pos = 0.0 + 0.0j
        heading = 0.0
        for _ in range(n):
            pos += step * np.exp(1j * heading)
            heading += dyaw
        est = g.latest().estimate
        np.testing.assert_allclose(est.translation[:2], [pos.real, pos.imag],
                                   atol=1e-9)
        np.testing.assert_allclose(est.translation[:2], [0.0, 0.0], atol=1e-9)
        wrapped = est.yaw() % (2 * np.pi)
        assert min(wrapped, 2 * np.pi - wrapped) < 1e-9

    def test_edge_must_advance_ids(self):
        with pytest.raises(ValueError, match="advance"):
            OdometryEdge(3, 3, Pose.identity("body"), DIAG)

    def test_edge_must_leave_latest_vertex(self):
        g = PoseGraph(mb([1, 0, 0, 0], [0, 0, 0]))
        with pytest.raises(ValueError, match="latest"):
            g.add_odometry(OdometryEdge(5, 6, Pose.identity("body"), DIAG))

    def test_timestamps_must_increase(self):
        g = PoseGraph(mb([1, 0, 0, 0], [0, 0, 0]), timestamp=100)
        with pytest.raises(ValueError, match="increase"):
            g.add_odometry(OdometryEdge(0, 1, Pose.identity("body"), DIAG),
                           timestamp=100)

    def test_covariance_validated(self):
        with pytest.raises(ValueError, match="6x6"):
            OdometryEdge(0, 1, Pose.identity("body"), np.eye(3))
        with pytest.raises(ValueError, match="positive"):
            OdometryEdge(0, 1, Pose.identity("body"), np.zeros((6, 6)))

    def test_window_floor(self):
        with pytest.raises(ValueError, match="window"):
            PoseGraph(mb([1, 0, 0, 0], [0, 0, 0]), window=1)


# ------------------------------------------------------- Jacobian consistency

class TestJacobians:
    def test_odometry_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(42)
        h = 1e-6
        for _ in range(60):
            g = PoseGraph(random_pose(rng))
            edge = OdometryEdge(0, 1, rel_pose(rng), DIAG)
            g.add_odometry(edge)
            # displace the estimate from consistency, but keep the rotation
            # residual away from the log branch point at pi where finite
            # differences stop being a valid reference
            off = np.concatenate([rng.normal(0, 1.0, 3), rng.uniform(-0.6, 0.6, 3)])
            g.vertex(1).estimate = perturbed(g.vertex(1).estimate, off)
            r0, Ji, Jj = g._odometry_residual(edge, with_jacobians=True)
            for vid, J in ((0, Ji), (1, Jj)):
                base = g.vertex(vid).estimate
                for k in range(6):
                    e = np.zeros(6)
                    e[k] = h
                    g.vertex(vid).estimate = perturbed(base, e)
                    rp, _, _ = g._odometry_residual(edge, with_jacobians=False)
                    g.vertex(vid).estimate = perturbed(base, -e)
                    rm, _, _ = g._odometry_residual(edge, with_jacobians=False)
                    g.vertex(vid).estimate = base
                    fd = (rp - rm) / (2 * h)
                    np.testing.assert_allclose(J[:, k], fd, atol=1e-5)

    def test_absolute_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(43)
        h = 1e-6
        for _ in range(60):
            g = PoseGraph(random_pose(rng))
            off = np.concatenate([rng.normal(0, 2.0, 3), rng.uniform(-0.6, 0.6, 3)])
            edge = AbsoluteEdge(0, perturbed(g.vertex(0).estimate, off), DIAG)
            r0, J = g._absolute_residual(edge, with_jacobians=True)
            base = g.vertex(0).estimate
            for k in range(6):
                e = np.zeros(6)
                e[k] = h
                g.vertex(0).estimate = perturbed(base, e)
                rp, _ = g._absolute_residual(edge, with_jacobians=False)
                g.vertex(0).estimate = perturbed(base, -e)
                rm, _ = g._absolute_residual(edge, with_jacobians=False)
                g.vertex(0).estimate = base
                fd = (rp - rm) / (2 * h)
                np.testing.assert_allclose(J[:, k], fd, atol=1e-5)

    def test_zero_residual_at_consistent_states(self):
        rng = np.random.default_rng(44)
        g = PoseGraph(random_pose(rng))
        edge = OdometryEdge(0, 1, rel_pose(rng), DIAG)
        g.add_odometry(edge)  # dead-reckoning satisfies the edge exactly
        r, _, _ = g._odometry_residual(edge, with_jacobians=False)
        np.testing.assert_allclose(r, np.zeros(6), atol=1e-12)


# ----------------------------------------------------------- optimization

class TestOptimize:
    def test_three_vertex_translation_closed_form(self):
        # rotations pinned near identity by a tiny rotation covariance, so
        # the problem is linear in (t1, t2) and the normal equations can be
        # solved independently; free rotations would tilt to soak up part of
        # the anisotropically weighted translation residuals
        z01 = np.array([1.0, 0.0, 0.0])
        z12 = np.array([1.0, 0.5, 0.0])
        za = np.array([2.3, 0.2, 0.1])
        W1 = np.diag([4.0, 4.0, 4.0])
        W2 = np.diag([1.0, 2.0, 1.0])
        WA = np.diag([9.0, 9.0, 1.0])

        def cov6(w3):
            c = 1e-12 * np.eye(6)
            c[:3, :3] = np.linalg.inv(w3)
            return c

        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        g.add_odometry(OdometryEdge(0, 1, Pose([1, 0, 0, 0], z01, "body", "body"),
                                    cov6(W1)))
        g.add_odometry(OdometryEdge(1, 2, Pose([1, 0, 0, 0], z12, "body", "body"),
                                    cov6(W2)))
        g.add_constraint(AbsoluteEdge(2, mb([1, 0, 0, 0], za), cov6(WA)))
        g.optimize()

        # closed form: minimize |t1-z01|_W1 + |t2-t1-z12|_W2 + |t2-za|_WA
        H = np.zeros((6, 6))
        b = np.zeros(6)
        H[:3, :3] = W1 + W2
        H[:3, 3:] = -W2
        H[3:, :3] = -W2
        H[3:, 3:] = W2 + WA
        b[:3] = W1 @ z01 - W2 @ z12
        b[3:] = W2 @ z12 + WA @ za
        t_opt = np.linalg.solve(H, b)
        np.testing.assert_allclose(g.vertex(1).estimate.translation, t_opt[:3],
                                   atol=1e-9)
        np.testing.assert_allclose(g.vertex(2).estimate.translation, t_opt[3:],
                                   atol=1e-9)

    def test_single_fix_reached_exactly(self):
        rng = np.random.default_rng(45)
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        g.add_odometry(OdometryEdge(0, 1, rel_pose(rng), DIAG))
        target = random_pose(rng, trans_scale=1.0, rot_scale=0.3)
        # absolute fix far tighter than the odometry: optimum sits at the fix
        g.add_constraint(AbsoluteEdge(1, target, 1e-8 * np.eye(6)))
        g.optimize(max_iters=50)
        est = g.vertex(1).estimate
        np.testing.assert_allclose(est.translation, target.translation, atol=1e-4)
        assert np.abs(est.rotation_matrix - target.rotation_matrix).max() < 1e-4

    def test_two_equal_fixes_meet_in_the_middle(self):
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        weak = np.eye(6) * 1e6
        g.add_odometry(OdometryEdge(0, 1, Pose([1, 0, 0, 0], [1, 0, 0],
                                               "body", "body"), weak))
        ca = np.eye(6) * 0.01
        g.add_constraint(AbsoluteEdge(1, mb([1, 0, 0, 0], [2.0, 1.0, 0.0]), ca))
        g.add_constraint(AbsoluteEdge(1, mb([1, 0, 0, 0], [4.0, 1.0, 0.0]), ca))
        g.optimize()
        np.testing.assert_allclose(g.vertex(1).estimate.translation,
                                   [3.0, 1.0, 0.0], atol=1e-3)

    def test_objective_never_increases(self):
        rng = np.random.default_rng(46)
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        for k in range(30):
            g.add_odometry(OdometryEdge(k, k + 1, rel_pose(rng, 0.3, 0.05), DIAG))
            if k % 7 == 3:
                noisy = compose(g.latest().estimate,
                                rel_pose(rng, 0.2, 0.05))
                g.add_constraint(AbsoluteEdge(g.latest().id,
                                              Pose(noisy.rotation, noisy.translation,
                                                   "map", "body"),
                                              DIAG * 4.0))
        chi_before = g.optimize(max_iters=0)
        chis = [chi_before]
        for _ in range(3):
            chis.append(g.optimize())
        for a, b in zip(chis, chis[1:]):
            assert b <= a + 1e-12

    def test_converged_state_is_stable(self):
        rng = np.random.default_rng(47)
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        for k in range(10):
            g.add_odometry(OdometryEdge(k, k + 1, rel_pose(rng, 0.3, 0.05), DIAG))
        g.add_constraint(AbsoluteEdge(10, random_pose(rng, 2.0, 0.2), DIAG))
        g.optimize(max_iters=100)
        before = {v.id: v.estimate.translation.copy() for v in g.vertices}
        g.optimize(max_iters=100)
        moved = max(np.linalg.norm(v.estimate.translation - before[v.id])
                    for v in g.vertices)
        assert moved < 1e-4

    def test_gauge_vertex_pinned(self):
        rng = np.random.default_rng(48)
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]), window=5)
        for k in range(9):
            g.add_odometry(OdometryEdge(k, k + 1, rel_pose(rng, 0.5, 0.1), DIAG))
        g.add_constraint(AbsoluteEdge(9, random_pose(rng, 3.0), DIAG))
        frozen = {v.id: v.estimate for v in g.vertices}
        g.optimize()
        # window covers ids 5..9; 5 is the gauge, everything older is untouched
        for vid in range(6):
            np.testing.assert_array_equal(g.vertex(vid).estimate.translation,
                                          frozen[vid].translation)
        assert np.linalg.norm(g.vertex(9).estimate.translation
                              - frozen[9].translation) > 1e-6

    def test_fixed_vertex_not_moved(self):
        rng = np.random.default_rng(49)
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        for k in range(4):
            g.add_odometry(OdometryEdge(k, k + 1, rel_pose(rng, 0.4, 0.1), DIAG))
        g.vertex(2).fixed = True
        g.add_constraint(AbsoluteEdge(4, random_pose(rng, 2.0), DIAG))
        pinned = g.vertex(2).estimate.translation.copy()
        g.optimize()
        np.testing.assert_array_equal(g.vertex(2).estimate.translation, pinned)

    def test_optimize_without_edges_returns_zero(self):
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        g.add_odometry(OdometryEdge(0, 1, Pose.identity("body"), DIAG))
        assert g.optimize() == pytest.approx(0.0, abs=1e-18)


# ------------------------------------------------------------ window handling

class TestWindow:
    def test_constraint_outside_window_dropped(self, caplog):
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]), window=5)
        for k in range(9):
            g.add_odometry(OdometryEdge(k, k + 1, Pose.identity("body"), DIAG))
        assert g.add_constraint(AbsoluteEdge(2, mb([1, 0, 0, 0], [0, 0, 0]),
                                             DIAG)) is False
        assert not g.vertex(2).localized
        assert g.add_constraint(AbsoluteEdge(7, mb([1, 0, 0, 0], [0, 0, 0]),
                                             DIAG)) is True
        assert g.vertex(7).localized

    def test_unknown_vertex_rejected(self):
        g = PoseGraph(mb([1, 0, 0, 0], [0.0, 0.0, 0.0]))
        with pytest.raises(ValueError, match="unknown"):
            g.add_constraint(AbsoluteEdge(5, mb([1, 0, 0, 0], [0, 0, 0]), DIAG))


# ------------------------------------------------------------- trajectory IO

class TestTrajectoryIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(50)
        vertices = [GraphVertex(i, 1000 + 7 * i, random_pose(rng),
                                localized=bool(i % 2)) for i in range(12)]
        path = tmp_path / "trajectory.csv"
        save_trajectory(vertices, path)
        loaded = load_trajectory(path)
        assert len(loaded) == 12
        for orig, back in zip(vertices, loaded):
            assert back.timestamp == orig.timestamp
            assert back.localized == orig.localized
            np.testing.assert_array_equal(back.estimate.translation,
                                          orig.estimate.translation)
            np.testing.assert_array_equal(back.estimate.rotation,
                                          orig.estimate.rotation)

    def test_wrong_header_rejected(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="trajectory"):
            load_trajectory(path)
