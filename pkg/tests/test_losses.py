import warnings

import numpy as np
import pytest

from pancakes.errors import ConfigurationError
from pancakes.losses import (LossWeights, d_ssim, depth_huber, geometric_cosine, l1_image,
                             total_loss)
from pancakes.metrics import EmptyMaskWarning, SSIM_C1, ssim


def test_l1_examples(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert l1_image(a, a)[0] == 0
    assert l1_image(np.ones((4, 5, 3)), np.zeros((4, 5, 3)))[0] == 1


def test_l1_scalar_loop(rng):
    a, b = rng.uniform(size=(2, 9, 7, 3))
    total = 0.0
    for i in range(9):
        for j in range(7):
            for c in range(3):
                total += abs(a[i, j, c] - b[i, j, c])
    value, grad = l1_image(a, b)
    assert abs(value - total / a.size) < 1e-9
    np.testing.assert_array_equal(grad, np.sign(a - b) / a.size)


def test_l1_shape_mismatch():
    with pytest.raises(ValueError):
        l1_image(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_dssim_identical(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert d_ssim(a, a)[0] == pytest.approx(0, abs=1e-15)


def test_dssim_constant_closed_form():
    a = np.full((16, 16, 3), 0.2)
    b = a + 0.5
    x, y = 0.2, 0.7
    closed = (2 * x * y + SSIM_C1) / (x * x + y * y + SSIM_C1)
    assert d_ssim(a, b)[0] == pytest.approx((1 - closed) / 2, abs=1e-12)


def test_dssim_fd(rng):
    a, b = rng.uniform(size=(2, 16, 16, 3))
    _, grad = d_ssim(a, b)
    h = 1e-5
    for _ in range(60):
        idx = tuple(rng.integers(0, s) for s in a.shape)
        ap, am = a.copy(), a.copy()
        ap[idx] += h
        am[idx] -= h
        fd = (d_ssim(ap, b)[0] - d_ssim(am, b)[0]) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-3 * abs(fd) + 1e-9


def test_dssim_relation_to_ssim(rng):
    a, b = rng.uniform(size=(2, 20, 24, 3))
    assert abs(d_ssim(a, b)[0] - (1 - ssim(a, b)) / 2) < 1e-9


def test_dssim_too_small():
    with pytest.raises(ValueError):
        d_ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


@pytest.mark.parametrize("dd, want", [(0.1, 0.005), (0.5, 0.08), (0.2, 0.02)])
def test_huber_examples(dd, want):
    ref = np.full((6, 6), 2.0)
    assert depth_huber(ref, ref + dd, delta=0.2)[0] == pytest.approx(want, abs=1e-15)
    assert depth_huber(ref, ref - dd, delta=0.2)[0] == pytest.approx(want, abs=1e-15)


def test_huber_branches_meet_at_knee():
    d = 0.2
    assert 0.5 * d * d == pytest.approx(d * (d - 0.5 * d), abs=1e-18)
    ref = np.full((1, 1), 1.0)
    lo = depth_huber(ref, ref + d - 1e-12)[0]
    hi = depth_huber(ref, ref + d + 1e-12)[0]
    assert abs(lo - 0.02) < 1e-12 and abs(hi - 0.02) < 1e-12


def test_huber_derivative_continuous_at_knee():
    ref = np.full((1, 1), 1.0)
    eps = 1e-8
    left = depth_huber(ref, ref + 0.2 - eps)[1][0, 0]
    right = depth_huber(ref, ref + 0.2 + eps)[1][0, 0]
    assert left == pytest.approx(0.2, abs=1e-7)
    assert right == pytest.approx(0.2, abs=1e-12)
    # numerical one-sided slopes agree too
    f = lambda x: depth_huber(ref, ref + x)[0]
    h = 1e-8
    assert (f(0.2) - f(0.2 - h)) / h == pytest.approx(0.2, abs=1e-6)
    assert (f(0.2 + h) - f(0.2)) / h == pytest.approx(0.2, abs=1e-6)


def test_huber_mask_and_holes(rng):
    ref = rng.uniform(1, 2, (8, 8))
    ren = ref + 0.1
    ref[0, :] = 0
    ref[1, 0] = np.nan
    value, grad = depth_huber(ref, ren)
    assert value == pytest.approx(0.005, abs=1e-15)
    assert np.all(grad[0] == 0) and grad[1, 0] == 0
    mask = np.zeros((8, 8), bool)
    mask[5:, 5:] = True
    value, grad = depth_huber(ref, ren + mask * 0.4, mask=mask)
    assert value == pytest.approx(0.2 * (0.5 - 0.1), abs=1e-12)
    assert np.count_nonzero(grad) == 9


def test_huber_empty_mask_warns():
    with pytest.warns(EmptyMaskWarning):
        value, grad = depth_huber(np.zeros((4, 4)), np.ones((4, 4)))
    assert value == 0 and not grad.any()


def test_huber_fd(rng):
    ref = rng.uniform(1, 3, (6, 7))
    ren = ref + rng.choice([-1, 1], ref.shape) * rng.uniform(0.01, 0.6, ref.shape)
    _, grad = depth_huber(ref, ren)
    h = 1e-6
    for idx in np.ndindex(ref.shape):
        p, m = ren.copy(), ren.copy()
        p[idx] += h
        m[idx] -= h
        fd = (depth_huber(ref, p)[0] - depth_huber(ref, m)[0]) / (2 * h)
        assert abs(fd - grad[idx]) < 1e-8


def test_cosine_examples(rng):
    b = rng.normal(size=(10, 3))
    assert geometric_cosine(b, b)[0] == pytest.approx(0, abs=1e-15)
    assert geometric_cosine(b, -b)[0] == pytest.approx(0, abs=1e-15)
    a = np.cross(b, rng.normal(size=(10, 3)))
    assert geometric_cosine(b, a)[0] == pytest.approx(1, abs=1e-12)


def test_cosine_sign_flip_invariance(rng):
    a, b = rng.normal(size=(2, 50, 3))
    flip = np.where(rng.uniform(size=(50, 1)) < 0.5, -1.0, 1.0)
    assert geometric_cosine(b * flip, a)[0] == geometric_cosine(b, a)[0]
    assert geometric_cosine(b, a * flip)[0] == geometric_cosine(b, a)[0]


def test_cosine_excludes_degenerate(rng):
    a, b = rng.normal(size=(2, 5, 3))
    b[2] = 0
    with pytest.warns(UserWarning):
        value, grad, n = geometric_cosine(b, a)
    assert n == 1
    keep = [0, 1, 3, 4]
    assert value == pytest.approx(geometric_cosine(b[keep], a[keep])[0], abs=1e-15)
    assert not grad[2].any()
    valid = np.array([True, False, True, True, True])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        value, _, _ = geometric_cosine(b, a, valid=valid)
    assert value == pytest.approx(geometric_cosine(b[[0, 3, 4]], a[[0, 3, 4]])[0], abs=1e-15)


def test_cosine_fd(rng):
    a, b = rng.normal(size=(2, 12, 3))
    _, grad, _ = geometric_cosine(b, a)
    h = 1e-6
    for idx in np.ndindex(b.shape):
        p, m = b.copy(), b.copy()
        p[idx] += h
        m[idx] -= h
        fd = (geometric_cosine(p, a)[0] - geometric_cosine(m, a)[0]) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-3 * abs(fd) + 1e-9


def test_total_examples():
    w = LossWeights()
    assert (w.lambda_dssim, w.lambda_depth, w.lambda_geo, w.huber_delta) == (0.2, 0.6, 0.2, 0.2)
    assert total_loss(1, 1, 1, 1, w, iteration=1001).l_total == pytest.approx(1.8, abs=1e-15)
    bd = total_loss(1, 1, 1, 1, w, iteration=500)
    assert bd.l_total == pytest.approx(1.6, abs=1e-15)
    assert bd.l_geo == 0
    assert total_loss(1, 1, 1, 1, w, iteration=1000).l_total == pytest.approx(1.6, abs=1e-15)
    base = LossWeights(lambda_depth=0, lambda_geo=0)
    assert total_loss(0.3, 0.7, 5.0, 9.0, base, iteration=2000).l_total == pytest.approx(
        0.8 * 0.3 + 0.2 * 0.7, abs=1e-15)


def test_total_breakdown_invariant(rng):
    w = LossWeights(0.3, 0.5, 0.7)
    for _ in range(20):
        x = rng.uniform(size=4)
        bd = total_loss(*x, w)
        assert bd.l_total == (1 - 0.3) * bd.l_image + 0.3 * bd.l_dssim + 0.5 * bd.l_depth + 0.7 * bd.l_geo


def test_total_linear_terms_scale(rng):
    w = LossWeights()
    x = rng.uniform(size=4)
    a = total_loss(x[0], 0.0, x[2], x[3], w)
    b = total_loss(3 * x[0], 0.0, 3 * x[2], 3 * x[3], w)
    assert b.l_total == pytest.approx(3 * a.l_total, rel=1e-14)


@pytest.mark.parametrize("kw", [{"lambda_depth": -0.1}, {"lambda_geo": -1}, {"lambda_dssim": 1.5},
                                {"huber_delta": 0}])
def test_bad_weights(kw):
    with pytest.raises(ConfigurationError):
        LossWeights(**kw)


def test_losses_nonnegative(rng):
    a, b = rng.uniform(size=(2, 16, 16, 3))
    assert l1_image(a, b)[0] >= 0
    assert d_ssim(a, b)[0] >= 0
    assert depth_huber(a[..., 0] + 1, b[..., 0])[0] >= 0
    assert geometric_cosine(a[:, 0], b[:, 0])[0] >= 0
