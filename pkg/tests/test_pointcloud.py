import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_rotation
from scga.errors import DomainError
from scga.pointcloud import (
    PointCloud,
    RigidTransform,
    SpatialIndex,
    apply_transform,
    axis_angle_matrix,
    center_of_mass,
    covariance,
    orthonormalize,
    principal_axes,
    radius_neighbors,
    rotation_angle,
)

coords = st.floats(-100, 100, allow_nan=False, width=64)
clouds = st.integers(2, 40).flatmap(lambda n: arrays(np.float64, (n, 3), elements=coords))


# -- PointCloud ------------------------------------------------------------


def test_default_masses_are_one():
    c = PointCloud(np.zeros((4, 3)))
    assert np.array_equal(c.masses, np.ones(4))
    assert c.total_mass == 4.0


@pytest.mark.parametrize(
    "points, masses",
    [
        (np.zeros((0, 3)), None),
        (np.zeros((3, 2)), None),
        ([[0, 0, np.nan]], None),
        ([[0, 0, np.inf]], None),
        (np.zeros((2, 3)), [1.0]),
        (np.zeros((2, 3)), [1.0, 0.0]),
        (np.zeros((2, 3)), [1.0, -2.0]),
    ],
)
def test_cloud_invariants_rejected(points, masses):
    with pytest.raises(DomainError):
        PointCloud(points, masses)


def test_cloud_is_read_only():
    c = PointCloud(np.ones((2, 3)))
    with pytest.raises(ValueError):
        c.points[0, 0] = 5.0


# -- center_of_mass ----------------------------------------------------------


def test_center_of_mass_symmetric_pair():
    assert np.allclose(center_of_mass(PointCloud([[0, 0, 0], [2, 0, 0]])), [1, 0, 0])


def test_center_of_mass_single_point():
    assert np.array_equal(center_of_mass(PointCloud([[3, 4, 5]])), [3, 4, 5])


def test_center_of_mass_weighted():
    c = PointCloud([[0, 0, 0], [4, 0, 0]], [1, 3])
    assert np.allclose(center_of_mass(c), [3, 0, 0])


# -- RigidTransform / apply_transform -----------------------------------------


def test_transform_invariants_rejected():
    with pytest.raises(DomainError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(DomainError):
        RigidTransform(2 * np.eye(3))
    with pytest.raises(DomainError):
        RigidTransform(scale=0.0)
    with pytest.raises(DomainError):
        RigidTransform(scale=np.inf)


def test_identity_leaves_points_bitwise_unchanged(rng):
    c = PointCloud(rng.normal(size=(30, 3)))
    out = apply_transform(c, RigidTransform())
    assert np.array_equal(out.points, c.points)


def test_pure_translation(rng):
    c = PointCloud(rng.normal(size=(10, 3)))
    out = apply_transform(c, RigidTransform(translation=[1, 0, 0]))
    assert np.allclose(out.points, c.points + [1, 0, 0], atol=1e-12)


def test_quarter_turn_about_centroid():
    c = PointCloud([[1, 0, 0], [-1, 0, 0]])
    out = apply_transform(c, RigidTransform(axis_angle_matrix([0, 0, 1], np.pi / 2)))
    assert np.allclose(out.points, [[0, 1, 0], [0, -1, 0]], atol=1e-12)


def test_masses_preserved(rng):
    c = PointCloud(rng.normal(size=(5, 3)), rng.uniform(0.5, 2, 5))
    out = apply_transform(c, RigidTransform(random_rotation(rng), [1, 2, 3], 1.5))
    assert np.array_equal(out.masses, c.masses)


@given(clouds, st.floats(0.1, 10), st.integers(0, 2**31))
def test_distances_scale_by_factor(P, s, seed):
    r = np.random.default_rng(seed)
    T = RigidTransform(random_rotation(r), r.normal(size=3), s)
    Q = apply_transform(PointCloud(P), T).points
    d0 = np.linalg.norm(P[:, None] - P[None], axis=2)
    d1 = np.linalg.norm(Q[:, None] - Q[None], axis=2)
    assert np.allclose(d1, s * d0, atol=1e-9 * max(1.0, d0.max() * s))


def test_composition_matches_sequential_application(rng):
    c = PointCloud(rng.normal(size=(20, 3)), rng.uniform(0.5, 2, 20))
    a = RigidTransform(random_rotation(rng), rng.normal(size=3), 1.3)
    b = RigidTransform(random_rotation(rng), rng.normal(size=3), 0.7)
    seq = apply_transform(apply_transform(c, a), b)
    once = apply_transform(c, a.then(b))
    assert np.allclose(seq.points, once.points, atol=1e-12)


def test_matrix_and_inverse_agree(rng):
    P = rng.normal(size=(8, 3))
    c = P.mean(axis=0)
    T = RigidTransform(random_rotation(rng), rng.normal(size=3), 2.0)
    H = T.matrix(c)
    via_matrix = P @ H[:3, :3].T + H[:3, 3]
    assert np.allclose(via_matrix, T.apply_points(P, c), atol=1e-12)
    assert np.allclose(T.invert_points(T.apply_points(P, c), c), P, atol=1e-12)


def test_orthonormalize_projects_drifted_rotation(rng):
    R = random_rotation(rng) + 1e-6 * rng.normal(size=(3, 3))
    Q = orthonormalize(R)
    assert np.allclose(Q.T @ Q, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(Q), 1.0)
    assert np.abs(Q - R).max() < 1e-5


@pytest.mark.parametrize("angle", [0.0, 1e-9, 0.3, np.pi / 2, np.pi - 1e-6, np.pi])
def test_rotation_angle_roundtrip(angle):
    assert np.isclose(rotation_angle(axis_angle_matrix([1, 2, 3], angle)), angle, atol=1e-9)


# -- covariance / principal_axes ------------------------------------------


def test_covariance_identical_points_is_zero():
    assert np.array_equal(covariance(PointCloud(np.ones((5, 3)))), np.zeros((3, 3)))


def test_covariance_axis_pair():
    assert np.allclose(covariance(PointCloud([[1, 0, 0], [-1, 0, 0]])), np.diag([1, 0, 0]))


def test_covariance_needs_two_points():
    with pytest.raises(DomainError):
        covariance(PointCloud([[0, 0, 0]]))


def test_covariance_rotates_as_similarity(rng):
    P = rng.normal(size=(50, 3)) * [3, 1, 0.5]
    R = random_rotation(rng)
    C0 = covariance(PointCloud(P))
    C1 = covariance(PointCloud(P @ R.T + 7.0))
    assert np.allclose(C1, R @ C0 @ R.T, atol=1e-12)


@pytest.mark.parametrize("diag", [(4, 1, 0), (1, 1, 1)])
def test_principal_axes_of_diagonal(diag):
    U, S, V = principal_axes(np.diag(np.array(diag, dtype=float)))
    assert np.allclose(S, sorted(diag, reverse=True))
    assert np.allclose(U @ np.diag(S) @ V.T, np.diag(diag), atol=1e-12)


def test_principal_axes_rotation_invariant_spectrum(rng):
    R = random_rotation(rng)
    C = R @ np.diag([4.0, 1.0, 0.0]) @ R.T
    U, S, V = principal_axes(C)
    assert np.allclose(S, [4, 1, 0], atol=1e-9)
    assert np.all(S >= 0)
    assert np.allclose(U @ np.diag(S) @ V.T, C, atol=1e-9)


def test_principal_axes_sign_convention(rng):
    U, _, _ = principal_axes(covariance(PointCloud(rng.normal(size=(30, 3)))))
    for k in range(3):
        col = U[:, k]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0


def test_principal_axes_rejects_asymmetric():
    with pytest.raises(DomainError):
        principal_axes(np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))


@given(clouds, st.floats(0.1, 10), st.integers(0, 2**31))
def test_covariance_spectrum_invariance(P, k, seed):
    r = np.random.default_rng(seed)
    R = random_rotation(r)
    S0 = principal_axes(covariance(PointCloud(P)))[1]
    S1 = principal_axes(covariance(PointCloud(P @ R.T + r.normal(size=3))))[1]
    S2 = principal_axes(covariance(PointCloud(k * P)))[1]
    tol = 1e-9 * max(1.0, S0[0])
    assert np.allclose(S1, S0, atol=tol)
    assert np.allclose(S2, k * k * S0, atol=tol * k * k)


# -- radius_neighbors -------------------------------------------------------


def brute_force(P, q, r):
    return np.flatnonzero(((P - q) ** 2).sum(axis=1) <= r * r)


def test_radius_beyond_diameter_returns_all(rng):
    P = rng.normal(size=(40, 3))
    idx = SpatialIndex(PointCloud(P))
    assert np.array_equal(radius_neighbors(idx, P[0], 100.0), np.arange(40))


def test_tiny_radius_returns_the_point():
    P = np.arange(30.0).reshape(10, 3)
    idx = SpatialIndex(PointCloud(P))
    assert np.array_equal(radius_neighbors(idx, P[4], 0.5), [4])


@pytest.mark.parametrize("r", [0.0, -1.0, np.nan])
def test_radius_must_be_positive(r):
    idx = SpatialIndex(PointCloud(np.zeros((3, 3))))
    with pytest.raises(DomainError):
        radius_neighbors(idx, [0, 0, 0], r)
    with pytest.raises(DomainError):
        idx.radius_all(r)


@given(st.integers(0, 2**31), st.floats(0.01, 3.0))
def test_radius_query_matches_scan(seed, r):
    g = np.random.default_rng(seed)
    P = g.normal(size=(100, 3))
    idx = SpatialIndex(PointCloud(P))
    for q in (g.normal(size=3), P[g.integers(100)]):
        assert np.array_equal(radius_neighbors(idx, q, r), brute_force(P, q, r))


def test_radius_query_matches_scan_10k():
    g = np.random.default_rng(7)
    P = g.uniform(-1, 1, size=(10_000, 3))
    idx = SpatialIndex(PointCloud(P))
    for _ in range(20):
        q, r = g.uniform(-1, 1, 3), g.uniform(0.01, 0.5)
        assert np.array_equal(radius_neighbors(idx, q, r), brute_force(P, q, r))


def test_radius_boundary_ties_included():
    # points exactly on the sphere of radius 1 around the origin
    P = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0], [0.5, 0, 0], [2.0, 0, 0]])
    idx = SpatialIndex(PointCloud(P))
    assert np.array_equal(radius_neighbors(idx, [0, 0, 0], 1.0), [0, 1, 2, 3])


def test_radius_all_matches_per_point_queries(rng):
    P = rng.normal(size=(200, 3))
    idx = SpatialIndex(PointCloud(P))
    for i, nb in enumerate(idx.radius_all(0.7)):
        assert np.array_equal(nb, brute_force(P, P[i], 0.7))
