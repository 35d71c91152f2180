import numpy as np
import pytest

from splatguard.renderer import look_at, orbit_views
from splatguard.scene import make_toy_scene


def central_fd(f, x, h=1e-5):
    """Central differences of scalar ``f`` at every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def small_scene():
    return make_toy_scene("object_on_plane", 120, 3)


@pytest.fixture(scope="session")
def small_views():
    return orbit_views(4, 32, 32, prefix="s")


@pytest.fixture(scope="session")
def cam24():
    return look_at((2.4, -1.2, 1.6), (0.0, 0.0, 0.2), 24, 24, fov_deg=50, view_id="c24")
