import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
import pytest

from pancakes.scene import Camera, GaussianCloud, N_SH

ACCEPTANCE_LINES = []


def random_cloud(n, seed, sh_degree=0, opacity=(0.2, 0.7), scale=(0.05, 0.25), spread=0.8,
                 depth=(2.5, 4.0)):
    """Gaussians scattered in front of ``default_camera`` with colors kept positive."""
    rng = np.random.default_rng(seed)
    means = np.column_stack([rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)])
    # distinct scales so the min axis is unambiguous
    base = rng.uniform(*scale, (n, 1))
    raw_scales = np.log(base * np.array([1.0, 0.7, 0.4]) * rng.uniform(0.9, 1.1, (n, 3)))
    raw_scales = raw_scales[:, rng.permutation(3)]
    sh = np.zeros((n, N_SH, 3))
    sh[:, 0, :] = rng.uniform(0.2, 1.2, (n, 3))
    sh[:, 1:, :] = rng.normal(0, 0.03, (n, N_SH - 1, 3))
    op = rng.uniform(*opacity, n)
    return GaussianCloud(means=means, raw_scales=raw_scales, raw_rots=rng.normal(size=(n, 4)),
                         sh=sh, raw_opacity=np.log(op / (1 - op)), sh_degree=sh_degree)


def default_camera(size=32, f=None):
    f = f if f is not None else 1.1 * size
    return Camera(f, f, size / 2 - 0.3, size / 2 + 0.2, size, size, np.eye(3), np.zeros(3))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """10 plane views at 32x32: nine train, one test."""
    from pancakes.data import synth_scene
    ds, _, _ = synth_scene(tmp_path_factory.mktemp("tiny"), "plane", n_views=10, resolution=32,
                           n_points=300, seed=3)
    return ds


def tiny_config(**kw):
    from pancakes.trainer import TrainConfig
    base = dict(total_iterations=30, densify_from=10, densify_until=20, densify_interval=5,
                geo_loss_start=12, sh_degree_interval=10)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
