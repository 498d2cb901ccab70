import numpy as np
import pytest

from pancakes.errors import InsufficientPointsError, NoReliableNormalError
from pancakes.geometry import quat_to_rotation
from pancakes.normals import NormalField, estimate_normals, nearest_normal


def _brute_nearest(points, reliable, q):
    d2 = np.sum((points - q) ** 2, axis=1)
    d2[~reliable] = np.inf
    return int(np.argmin(d2))


def test_plane_normals(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (200, 2)), np.zeros(200)])
    field = estimate_normals(pts)
    assert field.reliable.all()
    np.testing.assert_allclose(np.abs(field.normals[:, 2]), 1, atol=1e-6)


def test_sphere_normals(rng):
    p = rng.normal(size=(2000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    field = estimate_normals(p)
    cos = np.abs(np.sum(field.normals * p, axis=1))
    assert np.median(cos) > 0.99
    assert np.mean(cos > 0.99) > 0.95


def test_collinear_unreliable():
    pts = np.column_stack([np.arange(11.0), np.zeros(11), np.zeros(11)])
    field = estimate_normals(pts)
    assert not field.reliable.any()
    with pytest.raises(NoReliableNormalError):
        nearest_normal(field, np.zeros(3))


def test_too_few_points():
    with pytest.raises(InsufficientPointsError):
        estimate_normals(np.zeros((10, 3)), k=10)


def test_unit_norm(rng):
    field = estimate_normals(rng.normal(size=(300, 3)))
    np.testing.assert_allclose(np.linalg.norm(field.normals, axis=1), 1, atol=1e-6)


def test_rotation_equivariance(rng):
    pts = rng.normal(size=(400, 3)) * [1, 1, 0.1]
    R = quat_to_rotation(rng.normal(size=4))
    a = estimate_normals(pts).normals
    b = estimate_normals(pts @ R.T).normals
    np.testing.assert_allclose(np.abs(np.sum((a @ R.T) * b, axis=1)), 1, atol=1e-6)


def test_translation_invariance(rng):
    pts = rng.normal(size=(400, 3)) * [1, 1, 0.1]
    a = estimate_normals(pts).normals
    b = estimate_normals(pts + [3.0, -2.0, 5.0]).normals
    np.testing.assert_allclose(np.abs(np.sum(a * b, axis=1)), 1, atol=1e-9)


def test_neighbors_exclude_self():
    # a point far off the plane sees only plane points, so its normal is the plane's
    g = np.arange(5.0)
    xx, yy = np.meshgrid(g, g)
    plane = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(25)])
    pts = np.vstack([plane, [[2.0, 2.0, 0.5]]])
    field = estimate_normals(pts)
    assert abs(abs(field.normals[-1, 2]) - 1) < 1e-9


def test_query_at_point(rng):
    pts = rng.normal(size=(100, 3))
    field = estimate_normals(pts)
    for i in (0, 17, 99):
        np.testing.assert_array_equal(nearest_normal(field, pts[i]), field.normals[i])


def test_equidistant_tie_goes_to_lower_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 5, 0], [0, -5, 0]])
    normals = np.eye(3)[[0, 1, 2, 2]]
    field = NormalField.build(pts, normals)
    assert field.nearest_index(np.zeros(3)) == 0
    field = NormalField.build(pts[[1, 0, 2, 3]], normals)
    assert field.nearest_index(np.zeros(3)) == 0


def test_many_ties_on_a_grid():
    g = np.arange(-3.0, 4.0)
    pts = np.array(np.meshgrid(g, g, g)).reshape(3, -1).T
    field = NormalField.build(pts, np.tile([0, 0, 1.0], (len(pts), 1)))
    # cell centers are equidistant to 8 grid points; half-cells to 4 or 2
    q = np.array(np.meshgrid(*[np.arange(-2.5, 3, 0.5)] * 3)).reshape(3, -1).T
    got = field.nearest_index(q)
    want = [_brute_nearest(pts, field.reliable, x) for x in q]
    np.testing.assert_array_equal(got, want)


def test_random_queries_match_brute_force(rng):
    pts = rng.normal(size=(500, 3))
    field = estimate_normals(pts)
    reliable = field.reliable.copy()
    q = rng.normal(size=(10000, 3)) * 1.5
    got = field.nearest_index(q)
    d2 = np.sum((q[:, None, :] - pts[None, reliable, :]) ** 2, axis=-1)
    want = np.flatnonzero(reliable)[np.argmin(d2, axis=1)]
    np.testing.assert_array_equal(got, want)
    np.testing.assert_array_equal(field.nearest_normal(q), field.normals[want])


def test_unreliable_points_skipped():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    field = NormalField.build(pts, np.eye(3), reliable=np.array([False, True, True]))
    assert field.nearest_index(np.array([-0.1, 0, 0])) == 1


def test_non_finite_query(rng):
    field = estimate_normals(rng.normal(size=(20, 3)))
    with pytest.raises(ValueError):
        field.nearest_index(np.array([np.nan, 0, 0]))
