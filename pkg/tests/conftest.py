"""Shared fixtures: a small synthetic course and the maps built from it.

Session scope keeps the expensive world/map construction to one pass for
the whole unit suite; the acceptance tests build their own larger world.
"""

import numpy as np
import pytest

import curbloc as cl


@pytest.fixture(scope="session")
def small_world():
    spec = cl.standard_course(seed=5, block=120.0)
    return cl.generate_world(spec)


@pytest.fixture(scope="session")
def small_maps(small_world):
    frames = cl.simulate_drive(
        small_world,
        cl.NoiseSpec(odom_drift_per_m=0.0, detection_sigma=0.03, dropout=0.1),
        seed=21,
    )
    base, curb = cl.build_maps_from_drive(frames)
    return base, curb


@pytest.fixture(scope="session")
def noisy_frames(small_world):
    return cl.simulate_drive(
        small_world,
        cl.NoiseSpec(odom_drift_per_m=0.02, detection_sigma=0.05, dropout=0.2,
                     clutter_per_m2=0.5),
        seed=22,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
