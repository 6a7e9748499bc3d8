import numpy as np
import pytest


def random_path(rng, n_points, spread=10.0, min_seg=0.5):
    """Random 2D waypoints with no segment shorter than ``min_seg``."""
    while True:
        pts = np.cumsum(rng.normal(scale=spread / 2, size=(n_points, 2)), axis=0)
        if np.linalg.norm(np.diff(pts, axis=0), axis=1).min() >= min_seg:
            return pts


def random_durations(rng, m, low=0.5, high=3.0):
    return rng.uniform(low, high, size=m)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

