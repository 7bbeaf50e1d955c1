import numpy as np
import pytest
from hypothesis import settings

from voxspline import field, render

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

BOX = [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]


def random_grid(res=4, order=3, seed=0, mode="subtract_first", motion_scale=0.2):
    rng = np.random.default_rng(seed)
    g = field.grid_init(res, BOX, order=order, mode=mode)
    g.radiance += rng.normal(0.0, 1.0, g.radiance.shape)
    g.motion += rng.normal(0.0, motion_scale, g.motion.shape)
    return g


def random_rays(n=16, seed=0, near=2.0, far=4.0):
    """Rays from a radius-3 shell aimed roughly at the origin."""
    rng = np.random.default_rng(seed)
    o = rng.normal(0.0, 1.0, (n, 3))
    o = 3.0 * o / np.linalg.norm(o, axis=1, keepdims=True)
    d = -o / 3.0 + rng.normal(0.0, 0.15, (n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return render.Rays(o, d, near, far)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance lines are collected here and repeated at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
