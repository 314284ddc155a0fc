"""
Shared pytest setup: import path, the slow marker and small scene fixtures
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from decoder import SH_COEFFS, GaussianScene  # noqa: E402
from geometry import CameraPose, Intrinsics  # noqa: E402
from renderer import SH_C0  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run, enabled with SPLAT_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("SPLAT_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set SPLAT_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_scene(rng: np.random.Generator, n: int, spread: float = 0.4, depth: float = 2.0) -> GaussianScene:
    """n blobs in front of an identity camera at the origin"""
    means = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n), rng.uniform(depth - 0.5, depth + 0.5, n)])
    scales = rng.uniform(0.03, 0.15, size=(n, 3))
    rotations = np.stack([random_rotation(rng) for _ in range(n)]) if n else np.zeros((0, 3, 3))
    opacities = rng.uniform(0.2, 0.9, size=n)
    sh = rng.normal(scale=0.2, size=(n, 3, SH_COEFFS))
    sh[:, :, 0] = (rng.uniform(0.1, 0.9, size=(n, 3)) - 0.5) / SH_C0
    return GaussianScene.from_arrays(means, scales, rotations, opacities, sh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
