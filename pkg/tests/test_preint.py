"""Preintegration against brute-force integration and re-integration oracles."""

import numpy as np
import pytest

from vieo import geom, preint


def _brute_force(stamps, gyros, accels, bg, ba, substeps=10):
    """Fine-step direct integration oracle (linear interpolation of signals)."""
    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    for k in range(len(stamps) - 1):
        t0, t1 = stamps[k], stamps[k + 1]
        h = (t1 - t0) / substeps
        for s in range(substeps):
            f0 = s / substeps
            f1 = (s + 1) / substeps
            w0 = gyros[k] * (1 - f0) + gyros[k + 1] * f0 - bg
            w1 = gyros[k] * (1 - f1) + gyros[k + 1] * f1 - bg
            a0 = accels[k] * (1 - f0) + accels[k + 1] * f0 - ba
            a1 = accels[k] * (1 - f1) + accels[k + 1] * f1 - ba
            dR_next = dR @ geom.so3_exp(0.5 * (w0 + w1) * h)
            am = 0.5 * (dR @ a0 + dR_next @ a1)
            dp = dp + dv * h + 0.5 * am * h * h
            dv = dv + am * h
            dR = dR_next
    return dR, dv, dp


def _random_signals(rng, duration=0.3, rate=200.0):
    """Smooth low-frequency signals matching the rig's gentle motion regime."""
    n = int(duration * rate) + 1
    t = np.arange(n) / rate
    freqs = rng.uniform(0.2, 1.0, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amps_w = rng.uniform(0.1, 0.8, size=3)
    amps_a = rng.uniform(0.2, 1.5, size=3)
    gyros = amps_w * np.sin(np.outer(t, freqs) + phases)
    accels = amps_a * np.cos(np.outer(t, 0.7 * freqs) + phases) + np.array([0, 0, 9.81])
    return t, gyros, accels


def test_zero_input():
    t = np.arange(11) / 200.0
    z = np.zeros((11, 3))
    pre = preint.integrate(t, z, z, np.zeros(3), np.zeros(3))
    assert np.allclose(pre.dR, np.eye(3))
    assert np.allclose(pre.dv, 0)
    assert np.allclose(pre.dp, 0)
    assert pre.dt_total == pytest.approx(10 / 200.0)


def test_constant_gyro_closed_form():
    w = np.array([0.3, -0.5, 0.8])
    T = 1.0
    n = 201
    t = np.linspace(0, T, n)
    gyros = np.tile(w, (n, 1))
    accels = np.zeros((n, 3))
    pre = preint.integrate(t, gyros, accels, np.zeros(3), np.zeros(3))
    assert np.abs(pre.dR - geom.so3_exp(w * T)).max() < 1e-9


def test_nonmonotone_rejected():
    t = np.array([0.0, 0.01, 0.005])
    z = np.zeros((3, 3))
    with pytest.raises(ValueError):
        preint.integrate(t, z, z, np.zeros(3), np.zeros(3))


def test_matches_brute_force_20_signals():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(20):
        # preintegration spans one 30 Hz trigger interval in this system
        t, gyros, accels = _random_signals(rng, duration=1.0 / 30.0)
        bg = rng.normal(scale=0.01, size=3)
        ba = rng.normal(scale=0.05, size=3)
        pre = preint.integrate(t, gyros, accels, bg, ba)
        dR_o, dv_o, dp_o = _brute_force(t, gyros, accels, bg, ba)
        worst = max(worst,
                    np.abs(pre.dR - dR_o).max(),
                    np.abs(pre.dv - dv_o).max(),
                    np.abs(pre.dp - dp_o).max())
    assert worst < 1e-6


def test_bias_correct_zero_delta_identity():
    rng = np.random.default_rng(1)
    t, gyros, accels = _random_signals(rng)
    pre = preint.integrate(t, gyros, accels, np.zeros(3), np.zeros(3))
    dR, dv, dp = preint.bias_correct(pre, np.zeros(3), np.zeros(3))
    assert np.array_equal(dv, pre.dv)
    assert np.array_equal(dp, pre.dp)
    assert np.abs(dR - pre.dR).max() < 1e-15


def test_bias_correct_first_order_vs_reintegration():
    rng = np.random.default_rng(7)
    t, gyros, accels = _random_signals(rng, duration=1.0 / 30.0)
    bg0 = np.zeros(3)
    ba0 = np.zeros(3)
    pre = preint.integrate(t, gyros, accels, bg0, ba0)
    dbg = np.array([1e-3, -1e-3, 5e-4])
    dba = np.array([-2e-3, 1e-3, 1.5e-3])
    dR_c, dv_c, dp_c = preint.bias_correct(pre, bg0 + dbg, ba0 + dba)
    pre2 = preint.integrate(t, gyros, accels, bg0 + dbg, ba0 + dba)
    assert np.abs(dR_c - pre2.dR).max() < 1e-6
    assert np.abs(dv_c - pre2.dv).max() < 1e-6
    assert np.abs(dp_c - pre2.dp).max() < 1e-6


def test_bias_jacobians_vs_finite_differences():
    rng = np.random.default_rng(8)
    t, gyros, accels = _random_signals(rng)
    pre = preint.integrate(t, gyros, accels, np.zeros(3), np.zeros(3))
    h = 1e-5
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        pp = preint.integrate(t, gyros, accels, e, np.zeros(3))
        pm = preint.integrate(t, gyros, accels, -e, np.zeros(3))
        num_dr = geom.so3_log(pre.dR.T @ pp.dR) / h  # one-sided in the right chart
        assert np.abs(num_dr - pre.J_dr_bg[:, j]).max() < 1e-4
        num_dv = (pp.dv - pm.dv) / (2 * h)
        num_dp = (pp.dp - pm.dp) / (2 * h)
        assert np.abs(num_dv - pre.J_dv_bg[:, j]).max() < 1e-4
        assert np.abs(num_dp - pre.J_dp_bg[:, j]).max() < 1e-4
        pp = preint.integrate(t, gyros, accels, np.zeros(3), e)
        pm = preint.integrate(t, gyros, accels, np.zeros(3), -e)
        num_dv = (pp.dv - pm.dv) / (2 * h)
        num_dp = (pp.dp - pm.dp) / (2 * h)
        assert np.abs(num_dv - pre.J_dv_ba[:, j]).max() < 1e-9
        assert np.abs(num_dp - pre.J_dp_ba[:, j]).max() < 1e-9


def test_covariance_psd_and_monotone_trace():
    rng = np.random.default_rng(9)
    t, gyros, accels = _random_signals(rng, duration=0.5)
    traces = []
    for n in (20, 40, 80, len(t)):
        pre = preint.integrate(t[:n], gyros[:n], accels[:n], np.zeros(3), np.zeros(3))
        evals = np.linalg.eigvalsh(pre.cov)
        assert evals.min() > -1e-18
        traces.append(np.trace(pre.cov))
    assert all(b > a for a, b in zip(traces, traces[1:]))


def test_residual_zero_at_consistent_states():
    """Integrate a known trajectory and check the residual at its endpoints."""
    rng = np.random.default_rng(10)
    g = np.array([0.0, 0.0, -9.81])
    t, gyros, accels_body = _random_signals(rng, duration=0.4)

    # simulate the true states by integrating the same signals in the world
    R = np.eye(3)
    p = np.zeros(3)
    v = np.zeros(3)
    states = [(R, p, v)]
    for k in range(len(t) - 1):
        dt = t[k + 1] - t[k]
        w_mid = 0.5 * (gyros[k] + gyros[k + 1])
        R_next = R @ geom.so3_exp(w_mid * dt)
        a_w = 0.5 * (R @ accels_body[k] + R_next @ accels_body[k + 1]) + g
        p = p + v * dt + 0.5 * a_w * dt * dt
        v = v + a_w * dt
        R = R_next
        states.append((R, p, v))

    pre = preint.integrate(t, gyros, accels_body, np.zeros(3), np.zeros(3))
    Ri, pi, vi = states[0]
    Rj, pj, vj = states[-1]
    r = preint.residual(pre, Ri, pi, vi, np.zeros(3), np.zeros(3),
                        Rj, pj, vj, np.zeros(3), np.zeros(3), g)
    assert np.abs(r).max() < 1e-9


def test_residual_position_perturbation():
    rng = np.random.default_rng(11)
    g = np.array([0.0, 0.0, -9.81])
    n = 61
    t = np.arange(n) / 200.0
    gyros = np.zeros((n, 3))
    accels = np.tile(-g, (n, 1))  # stationary
    pre = preint.integrate(t, gyros, accels, np.zeros(3), np.zeros(3))
    eye = np.eye(3)
    z3 = np.zeros(3)
    r0 = preint.residual(pre, eye, z3, z3, z3, z3, eye, z3, z3, z3, z3, g)
    assert np.abs(r0).max() < 1e-12
    r1 = preint.residual(pre, eye, z3, z3, z3, z3, eye, np.array([0.01, 0, 0]),
                         z3, z3, z3, g)
    assert abs(r1[preint.S_P][0] - 0.01) < 1e-12

    # whitened: 1 cm scaled by the position information
    W, clamped = preint.sqrt_info(pre.cov + 1e-14 * np.eye(15))
    rw = W @ r1
    assert np.isfinite(rw).all()


def test_residual_gauge_invariance():
    """Left-multiplying both frame states by a rigid transform leaves r unchanged."""
    rng = np.random.default_rng(12)
    g = np.array([0.0, 0.0, -9.81])
    t, gyros, accels = _random_signals(rng, duration=0.3)
    pre = preint.integrate(t, gyros, accels, np.zeros(3), np.zeros(3))

    Ri = geom.random_rotation(rng)
    Rj = geom.random_rotation(rng)
    pi, pj = rng.normal(size=3), rng.normal(size=3)
    vi, vj = rng.normal(size=3), rng.normal(size=3)
    bgi = rng.normal(scale=1e-3, size=3)
    bai = rng.normal(scale=1e-2, size=3)
    r_before = preint.residual(pre, Ri, pi, vi, bgi, bai, Rj, pj, vj, bgi, bai, g)

    # the transform must fix gravity for exact invariance: rotate about g
    ang = rng.uniform(0, 2 * np.pi)
    T_R = geom.so3_exp(ang * g / np.linalg.norm(g))
    T_t = rng.normal(size=3)
    r_after = preint.residual(
        pre, T_R @ Ri, T_R @ pi + T_t, T_R @ vi, bgi, bai,
        T_R @ Rj, T_R @ pj + T_t, T_R @ vj, bgi, bai, g)
    assert np.abs(r_after - r_before).max() < 1e-10
