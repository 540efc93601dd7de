"""Rotation / sphere primitive tests: closed-form cases plus seeded random sweeps."""

import numpy as np
import pytest
from scipy.linalg import expm

from vieo import geom


def test_skew_explicit():
    S = geom.skew([1.0, 2.0, 3.0])
    assert np.array_equal(S, np.array([[0, -3, 2], [3, 0, -1], [-2, 1, 0]], dtype=float))
    assert np.array_equal(geom.skew([0, 0, 0]), np.zeros((3, 3)))


def test_skew_matches_cross_product():
    rng = np.random.default_rng(0)
    for _ in range(200):
        v, w = rng.normal(size=3), rng.normal(size=3)
        # componentwise cross product as the independent oracle
        cx = np.array([v[1] * w[2] - v[2] * w[1],
                       v[2] * w[0] - v[0] * w[2],
                       v[0] * w[1] - v[1] * w[0]])
        assert np.allclose(geom.skew(v) @ w, cx, atol=1e-14)
        assert np.allclose(geom.skew(v), -geom.skew(v).T)


def test_exp_identity_and_quarter_turn():
    assert np.allclose(geom.so3_exp([0, 0, 0]), np.eye(3))
    R = geom.so3_exp([np.pi / 2, 0, 0])
    # compare against the Rodrigues closed form evaluated numerically
    th = np.pi / 2
    a = np.array([1.0, 0, 0])
    R_ref = np.cos(th) * np.eye(3) + (1 - np.cos(th)) * np.outer(a, a) + np.sin(th) * geom.skew(a)
    assert np.allclose(R, R_ref, atol=1e-15)
    assert np.allclose(R @ np.array([0, 0, 1.0]), [0, -1, 0], atol=1e-15)
    assert not np.allclose(R @ np.array([0, 0, 1.0]), [0, 1, 0], atol=1e-3)


def test_exp_matches_matrix_exponential():
    rng = np.random.default_rng(1)
    for _ in range(100):
        phi = rng.normal(size=3)
        assert np.allclose(geom.so3_exp(phi), expm(geom.skew(phi)), atol=1e-12)


def test_exp_log_round_trip_1000():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        axis = geom.random_unit(rng)
        phi = axis * rng.uniform(0, np.pi - 1e-3)
        back = geom.so3_log(geom.so3_exp(phi))
        worst = max(worst, np.abs(back - phi).max())
    assert worst < 1e-10


def test_log_identity_and_inverse():
    assert np.allclose(geom.so3_log(np.eye(3)), np.zeros(3))
    phi = np.array([0.3, -0.2, 0.1])
    assert np.allclose(geom.so3_log(geom.so3_exp(phi)), phi, atol=1e-12)


def test_log_near_pi_flagged():
    R = geom.so3_exp([0, 0, np.pi])
    v, flag = geom.so3_log(R, with_flag=True)
    assert flag
    assert np.allclose(np.abs(v), [0, 0, np.pi], atol=1e-9)
    # slightly off pi must still round-trip accurately and not be flagged
    R2 = geom.so3_exp([0, 0, np.pi - 1e-5])
    v2, flag2 = geom.so3_log(R2, with_flag=True)
    assert not flag2
    assert np.allclose(v2, [0, 0, np.pi - 1e-5], atol=1e-10)


def test_exp_batch_matches_scalar():
    rng = np.random.default_rng(3)
    phis = rng.normal(size=(50, 3))
    phis[0] = 0.0
    phis[1] = [1e-12, 0, 0]
    batch = geom.so3_exp_batch(phis)
    for i in range(len(phis)):
        assert np.allclose(batch[i], geom.so3_exp(phis[i]), atol=1e-14)


def test_right_jacobian_identity_and_bch():
    assert np.allclose(geom.right_jacobian([0, 0, 0]), np.eye(3))
    rng = np.random.default_rng(4)
    for _ in range(100):
        phi = geom.random_unit(rng) * rng.uniform(0, 3.0)
        d = rng.normal(size=3)
        d *= 1e-4 / np.linalg.norm(d)
        lhs = geom.so3_exp(phi + d)
        rhs = geom.so3_exp(phi) @ geom.so3_exp(geom.right_jacobian(phi) @ d)
        assert np.abs(lhs - rhs).max() < 1e-7


def test_right_jacobian_termwise_closed_form():
    a = np.array([1.0, 2.0, -1.0])
    a /= np.linalg.norm(a)
    th = np.pi / 3
    # three-term unit-axis expression evaluated termwise
    J_ref = (np.sin(th) / th) * np.eye(3) \
        + (1 - np.sin(th) / th) * np.outer(a, a) \
        - ((1 - np.cos(th)) / th) * geom.skew(a)
    assert np.allclose(geom.right_jacobian(th * a), J_ref, atol=1e-14)


def test_right_jacobian_inv():
    rng = np.random.default_rng(5)
    for _ in range(100):
        phi = geom.random_unit(rng) * rng.uniform(1e-9, 3.0)
        J = geom.right_jacobian(phi)
        Ji = geom.right_jacobian_inv(phi)
        assert np.allclose(J @ Ji, np.eye(3), atol=1e-10)
    assert np.allclose(geom.left_jacobian_inv(phi), geom.right_jacobian_inv(-phi))


def test_cgr_round_trip():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        s = rng.normal(size=3) * rng.uniform(0, 3)
        R = geom.cgr_to_matrix(s)
        assert geom.is_rotation(R, tol=1e-12)
        assert np.allclose(geom.cgr_from_matrix(R), s, atol=1e-9 * (1 + np.dot(s, s)))
    # close to pi the magnitude tan(theta/2) is ill-conditioned, so compare the
    # recovered angle/axis instead of the raw vector
    a = geom.random_unit(rng)
    s = np.tan((np.pi - 1e-5) / 2) * a
    s_back = geom.cgr_from_matrix(geom.cgr_to_matrix(s))
    ang = 2 * np.arctan(np.linalg.norm(s_back))
    assert abs(ang - (np.pi - 1e-5)) < 1e-9
    assert np.allclose(s_back / np.linalg.norm(s_back), a, atol=1e-9)


def test_cgr_small_angle_consistency():
    assert np.allclose(geom.cgr_to_matrix([0, 0, 0]), np.eye(3))
    s = np.array([0, 0, np.tan(np.pi / 8)])
    assert np.allclose(geom.cgr_to_matrix(s), geom.so3_exp([0, 0, np.pi / 4]), atol=1e-14)


def test_sphere_basis_north_pole_and_orthogonality():
    B = geom.sphere_basis([0.0, 0.0, 1.0])
    assert np.allclose(B, [[1, 0], [0, 1], [0, 0]])
    rng = np.random.default_rng(7)
    for _ in range(1000):
        x = geom.random_unit(rng)
        if x[2] <= -1 + 1e-6:
            continue
        B = geom.sphere_basis(x)
        assert np.abs(B.T @ x).max() < 1e-12
        assert np.allclose(B.T @ B, np.eye(2), atol=1e-12)
        d = rng.normal(size=2)
        assert abs(np.linalg.norm(B @ d) - np.linalg.norm(d)) < 1e-12


def test_sphere_basis_singular_chart():
    with pytest.raises(geom.SphereChartError):
        geom.sphere_basis([0.0, 0.0, -1.0])


def test_sphere_boxplus():
    x = np.array([0.0, 0.0, 1.0])
    assert np.allclose(geom.sphere_boxplus(x, [0.0, 0.0]), x)
    th = 0.3
    expected = geom.so3_exp([th, 0, 0]) @ x
    assert np.allclose(geom.sphere_boxplus(x, [th, 0.0]), expected, atol=1e-14)
    assert np.allclose(expected, [0, -np.sin(th), np.cos(th)], atol=1e-14)


def test_sphere_boxplus_norm_and_geodesic_1000():
    rng = np.random.default_rng(8)
    for _ in range(1000):
        x = geom.random_unit(rng)
        if x[2] <= -0.99:
            continue
        d = rng.normal(size=2) * rng.uniform(0, 0.9)
        y = geom.sphere_boxplus(x, d)
        assert abs(np.linalg.norm(y) - 1.0) < 1e-12
        geo = np.arccos(np.clip(np.dot(x, y), -1, 1))
        assert abs(geo - np.linalg.norm(d)) < 1e-9


def test_sphere_boxminus_inverts_boxplus():
    rng = np.random.default_rng(9)
    for _ in range(300):
        x = geom.random_unit(rng)
        if x[2] <= -0.9:
            continue
        d = rng.normal(size=2) * 0.5
        y = geom.sphere_boxplus(x, d)
        assert np.allclose(geom.sphere_boxminus(y, x), d, atol=1e-9)


def test_angle_about_axis():
    rng = np.random.default_rng(10)
    a = geom.random_unit(rng)
    assert geom.angle_about_axis(np.eye(3), a) == 0.0
    assert abs(geom.angle_about_axis(geom.so3_exp(0.7 * a), a) - 0.7) < 1e-12
    # wrap-around case
    got = geom.angle_about_axis(geom.so3_exp(3.5 * a), a)
    assert abs(got - (3.5 - 2 * np.pi)) < 1e-12
    # off-axis content is reported
    R_off = geom.so3_exp(0.5 * a) @ geom.so3_exp(0.01 * np.cross(a, geom.random_unit(rng)))
    _, off = geom.angle_about_axis_full(R_off, a)
    assert off > 1e-3


def test_wrap_angle():
    assert geom.wrap_angle(np.pi) == np.pi
    assert geom.wrap_angle(-np.pi) == np.pi
    assert abs(geom.wrap_angle(3.5) - (3.5 - 2 * np.pi)) < 1e-15
    assert abs(geom.wrap_angle(0.25) - 0.25) < 1e-15
    arr = geom.wrap_angle(np.array([0.1, 2 * np.pi + 0.1, -0.1]))
    assert np.allclose(arr, [0.1, 0.1, -0.1])


def test_rotation_invariants_1000():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        R = geom.random_rotation(rng)
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(R) - 1.0) < 1e-12
