"""Synthetic streets and drives: geometry oracles, noise statistics, datasets."""

import numpy as np
import pytest
from scipy.spatial import cKDTree

from curbloc.geometry import PointCloud3, apply, compose, inverse
from curbloc.simulate import (
    DriveFrame,
    NoiseSpec,
    Street,
    WorldSpec,
    generate_world,
    load_dataset,
    save_dataset,
    simulate_drive,
    standard_course,
)

QUIET = NoiseSpec(odom_drift_per_m=0.0, odom_yaw_drift_per_m=0.0,
                  detection_sigma=0.0, dropout=0.0, clutter_per_m2=0.0)


def straight_spec(length=100.0, lane=8.0, seed=0, **kw):
    return WorldSpec(seed=seed, streets=(Street(np.array([[0.0, 0.0], [length, 0.0]]),
                                                lane),), **kw)


# ------------------------------------------------------------ world geometry

class TestWorldGeometry:
    def test_straight_street_curbs_at_half_lane_width(self):
        world = generate_world(straight_spec(length=100.0, lane=8.0))
        assert len(world.curb_pieces) == 2
        pts = world.curb_points.points
        assert len(pts) == 2 * 501  # spacing 0.2 over 100 m, endpoints included
        assert set(np.round(pts[:, 1], 9)) == {-4.0, 4.0}
        assert np.all(pts[:, 0] >= 0.0) and np.all(pts[:, 0] <= 100.0)
        np.testing.assert_allclose(pts[:, 2], 0.12, atol=1e-12)

    def test_intersection_disk_carves_both_curbs(self):
        spec = straight_spec(length=100.0, lane=8.0)
        spec = WorldSpec(seed=0, streets=spec.streets,
                         intersections=((50.0, 0.0, 5.0),))
        world = generate_world(spec)
        # each curb line at y = +-4 loses |x - 50| <= 3 and splits in two
        assert len(world.curb_pieces) == 4
        pts = world.curb_points.points
        assert np.all(np.hypot(pts[:, 0] - 50.0, pts[:, 1]) > 5.0)

    def test_crossing_streets_meet_in_eight_curb_runs(self):
        ns = Street(np.array([[0.0, -50.0], [0.0, 50.0]]), 7.0)
        ew = Street(np.array([[-50.0, 0.0], [50.0, 0.0]]), 7.0)
        spec = WorldSpec(seed=0, streets=(ew, ns),
                         intersections=((0.0, 0.0, 6.0),))
        world = generate_world(spec)
        assert len(world.curb_pieces) == 8

    def test_driveway_gaps_split_runs(self):
        spec = straight_spec(length=200.0, driveway_gap_spacing=40.0)
        world = generate_world(spec)
        assert len(world.curb_pieces) > 2
        total = len(world.curb_points)
        assert total < 2 * 1001  # gaps removed something

    def test_self_intersecting_street_rejected(self):
        bow_tie = Street(np.array([[0.0, 0.0], [10.0, 10.0],
                                   [10.0, 0.0], [0.0, 10.0]]))
        with pytest.raises(ValueError, match="intersects itself"):
            generate_world(WorldSpec(seed=0, streets=(bow_tie,)))

    def test_doubling_back_rejected(self):
        there_and_back = Street(np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="doubles back"):
            generate_world(WorldSpec(seed=0, streets=(there_and_back,)))

    def test_degenerate_inputs_rejected(self):
        with pytest.raises(ValueError, match="waypoints"):
            Street(np.array([[0.0, 0.0]]))
        with pytest.raises(ValueError, match="lane width"):
            Street(np.array([[0.0, 0.0], [1.0, 0.0]]), lane_width=0.0)
        with pytest.raises(ValueError, match="density"):
            WorldSpec(seed=0, streets=(), curb_density=0.0)
        with pytest.raises(ValueError, match="height"):
            WorldSpec(seed=0, streets=(), curb_height=-1.0)

    def test_same_spec_same_world(self):
        spec = standard_course(seed=9, block=120.0)
        a = generate_world(spec)
        b = generate_world(spec)
        np.testing.assert_array_equal(a.curb_points.points, b.curb_points.points)

    def test_standard_course_layout(self):
        spec = standard_course(seed=5, block=120.0)
        world = generate_world(spec)
        assert len(spec.intersections) == 4
        assert len(world.curb_pieces) > 8
        seg = np.diff(world.route, axis=0)
        assert np.linalg.norm(seg, axis=1).sum() == pytest.approx(480.0)


# ------------------------------------------------------------------- driving

class TestDrive:
    def test_noiseless_frames_are_exact(self):
        world = generate_world(straight_spec(length=80.0))
        frames = simulate_drive(world, QUIET, seed=0)
        tree = cKDTree(world.curb_points.points)
        pose = frames[0].odom_step
        assert pose is None
        # odometry chain dead-reckons exactly onto ground truth
        chained = frames[0].gt_pose
        for f in frames[1:]:
            chained = compose(chained, f.odom_step)
            np.testing.assert_allclose(chained.translation, f.gt_pose.translation,
                                       atol=1e-9)
        # every detection point re-projects onto a real curb point
        for f in frames[::7]:
            back = apply(f.gt_pose, f.detection)
            d, _ = tree.query(back.points)
            assert d.max() < 1e-9

    def test_detections_respect_sensor_range(self):
        world = generate_world(straight_spec(length=80.0))
        for f in simulate_drive(world, QUIET, seed=0, sensor_range=25.0):
            back = apply(f.gt_pose, f.detection).points
            if len(back):
                d = np.hypot(back[:, 0] - f.gt_pose.translation[0],
                             back[:, 1] - f.gt_pose.translation[1])
                assert d.max() <= 25.0 + 1e-9

    def test_frame_pacing_and_timestamps(self):
        world = generate_world(straight_spec(length=80.0))
        frames = simulate_drive(world, QUIET, seed=0, speed=8.0, frame_rate=10.0)
        assert len(frames) == 101  # floor(80 / 0.8) + 1
        stamps = np.array([f.timestamp for f in frames])
        np.testing.assert_array_equal(np.diff(stamps), int(1e8))
        steps = np.array([np.linalg.norm(f.odom_step.translation)
                          for f in frames[1:]])
        np.testing.assert_allclose(steps, 0.8, atol=1e-9)

    def test_full_dropout_empties_every_detection(self):
        world = generate_world(straight_spec(length=80.0))
        noise = NoiseSpec(0.0, 0.0, 0.0, dropout=1.0, clutter_per_m2=0.0)
        assert all(len(f.detection) == 0
                   for f in simulate_drive(world, noise, seed=1))

    def test_dropout_thins_detections_proportionally(self):
        world = generate_world(straight_spec(length=80.0))
        full = simulate_drive(world, QUIET, seed=2)
        noise = NoiseSpec(0.0, 0.0, 0.0, dropout=0.4, clutter_per_m2=0.0)
        thin = simulate_drive(world, noise, seed=2)
        n_full = sum(len(f.detection) for f in full)
        n_thin = sum(len(f.detection) for f in thin)
        assert 0.55 < n_thin / n_full < 0.65

    def test_clutter_stays_inside_curb_band(self):
        world = generate_world(straight_spec(length=80.0))
        noise = NoiseSpec(0.0, 0.0, 0.0, dropout=0.0,
                          clutter_per_m2=0.5, clutter_band=2.0)
        frames = simulate_drive(world, noise, seed=3)
        assert sum(len(f.detection) for f in frames) \
            > sum(len(f.detection) for f in simulate_drive(world, QUIET, seed=3))
        curb2d = world.curb_points.points[:, :2]
        tree = cKDTree(curb2d)
        for f in frames[::10]:
            back = apply(f.gt_pose, f.detection).points
            d, _ = tree.query(back[:, :2])
            assert d.max() <= 2.0 + 1e-6

    def test_visual_mask_follows_arc_length(self):
        world = generate_world(straight_spec(length=80.0))
        frames = simulate_drive(world, QUIET, seed=0, visual_mask=[(20.0, 40.0)])
        for t, f in enumerate(frames):
            s = t * 0.8
            assert f.visual_available == (not 20.0 <= s < 40.0)

    def test_same_seed_reproduces_bitwise(self):
        world = generate_world(straight_spec(length=80.0))
        noise = NoiseSpec(0.02, 0.001, 0.05, 0.2, 0.5)
        a = simulate_drive(world, noise, seed=11)
        b = simulate_drive(world, noise, seed=11)
        assert len(a) == len(b)
        for fa, fb in zip(a, b):
            np.testing.assert_array_equal(fa.detection.points, fb.detection.points)
            np.testing.assert_array_equal(fa.odom_step.translation if fa.odom_step
                                          is not None else np.zeros(3),
                                          fb.odom_step.translation if fb.odom_step
                                          is not None else np.zeros(3))

    def test_different_seed_differs(self):
        world = generate_world(straight_spec(length=80.0))
        noise = NoiseSpec(0.02, 0.001, 0.05, 0.2, 0.0)
        a = simulate_drive(world, noise, seed=11)
        b = simulate_drive(world, noise, seed=12)
        assert any(len(fa.detection) != len(fb.detection)
                   or not np.array_equal(fa.detection.points, fb.detection.points)
                   for fa, fb in zip(a, b))

    def test_odometry_drift_is_a_random_walk(self):
        # final dead-reckoning error after distance D should scatter with
        # standard deviation sigma * sqrt(step * D) per axis
        world = generate_world(straight_spec(length=104.0))
        sigma = 0.02
        noise = NoiseSpec(sigma, 0.0, 0.0, dropout=1.0, clutter_per_m2=0.0)
        finals = []
        for seed in range(50):
            frames = simulate_drive(world, noise, seed=seed)
            pose = frames[0].gt_pose
            for f in frames[1:]:
                pose = compose(pose, f.odom_step)
            finals.append(pose.translation[:2] - frames[-1].gt_pose.translation[:2])
        finals = np.array(finals)
        expected_sd = sigma * np.sqrt(0.8 * 104.0)
        ratio = finals.std(axis=0, ddof=1) / expected_sd
        assert np.all(ratio > 0.6) and np.all(ratio < 1.4)
        assert np.all(np.abs(finals.mean(axis=0))
                      < 3.0 * expected_sd / np.sqrt(50))


# ----------------------------------------------------------------- datasets

class TestDatasetIO:
    def test_round_trip(self, tmp_path):
        world = generate_world(straight_spec(length=40.0))
        noise = NoiseSpec(0.02, 0.001, 0.05, 0.2, 0.3)
        frames = simulate_drive(world, noise, seed=4)
        save_dataset(frames, tmp_path / "drive")
        loaded = load_dataset(tmp_path / "drive")
        assert len(loaded) == len(frames)
        assert loaded[0].odom_step is None
        for orig, back in zip(frames, loaded):
            assert back.timestamp == orig.timestamp
            assert back.visual_available == orig.visual_available
            np.testing.assert_array_equal(back.gt_pose.translation,
                                          orig.gt_pose.translation)
            # cloud files carry nine significant digits
            assert len(back.detection) == len(orig.detection)
            np.testing.assert_allclose(back.detection.points,
                                       orig.detection.points,
                                       rtol=1e-8, atol=1e-6)
            assert back.detection.frame == "body"
            if orig.odom_step is not None:
                np.testing.assert_array_equal(back.odom_step.translation,
                                              orig.odom_step.translation)
                np.testing.assert_array_equal(back.odom_step.rotation,
                                              orig.odom_step.rotation)

    def test_foreign_manifest_rejected(self, tmp_path):
        (tmp_path / "manifest.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="manifest"):
            load_dataset(tmp_path)
