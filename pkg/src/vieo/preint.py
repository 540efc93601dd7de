"""IMU preintegration between camera triggers.

Compounds gyro/accel samples into relative rotation/velocity/position
increments with a 15x15 covariance, first-order bias Jacobians and the
whitened two-frame residual used by the window estimator.

Error-state ordering everywhere: (d_theta, d_bg, d_v, d_ba, d_p).
The rotation increment dR maps frame-j body coordinates into frame-i body
coordinates; dv and dp are expressed in the frame-i body frame.
"""

from dataclasses import dataclass

import numpy as np

from . import geom

# slices of the 15-dim error state
S_TH = slice(0, 3)
S_BG = slice(3, 6)
S_V = slice(6, 9)
S_BA = slice(9, 12)
S_P = slice(12, 15)


@dataclass
class ImuNoise:
    """Continuous-time noise densities (units per sqrt(Hz))."""
    gyro: float = 1e-3
    gyro_walk: float = 1e-5
    accel: float = 1e-2
    accel_walk: float = 1e-4


@dataclass
class ImuPreintegrated:
    dt_total: float
    dR: np.ndarray
    dv: np.ndarray
    dp: np.ndarray
    cov: np.ndarray                 # 15x15, (d_theta, d_bg, d_v, d_ba, d_p)
    J_dr_bg: np.ndarray
    J_dv_bg: np.ndarray
    J_dv_ba: np.ndarray
    J_dp_bg: np.ndarray
    J_dp_ba: np.ndarray
    bg_lin: np.ndarray
    ba_lin: np.ndarray


def integrate(stamps, gyros, accels, bg, ba, noise=None):
    """Midpoint-rule preintegration of an IMU sample run.

    ``stamps`` must be strictly increasing; ``gyros``/``accels`` are (n, 3).
    Bias estimates ``bg``/``ba`` are held at the linearization point.
    """
    stamps = np.asarray(stamps, dtype=float)
    gyros = np.asarray(gyros, dtype=float)
    accels = np.asarray(accels, dtype=float)
    if len(stamps) < 2:
        raise ValueError("need at least two IMU samples to preintegrate")
    if np.any(np.diff(stamps) <= 0):
        raise ValueError("IMU timestamps must be strictly increasing")
    noise = noise or ImuNoise()
    bg = np.asarray(bg, dtype=float)
    ba = np.asarray(ba, dtype=float)

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    cov = np.zeros((15, 15))
    J_dr_bg = np.zeros((3, 3))
    J_dv_bg = np.zeros((3, 3))
    J_dv_ba = np.zeros((3, 3))
    J_dp_bg = np.zeros((3, 3))
    J_dp_ba = np.zeros((3, 3))

    I3 = np.eye(3)
    sg2, swg2 = noise.gyro ** 2, noise.gyro_walk ** 2
    sa2, swa2 = noise.accel ** 2, noise.accel_walk ** 2
    F = np.zeros((15, 15))
    Phi = np.eye(15)

    # continuous error-state rows discretized at the midpoint:
    #   d_theta' = -w^ d_theta - d_bg - n_g
    #   d_v'     = -dR a^ d_theta - dR d_ba - dR n_a
    #   d_p'     = d_v
    # Phi = I + F dt; the process noise enters blockwise
    # (G Qc G^T has diagonal blocks n_g, n_wg, dR n_a dR^T, n_wa).
    for k in range(len(stamps) - 1):
        dt = stamps[k + 1] - stamps[k]
        w_mid = 0.5 * (gyros[k] + gyros[k + 1]) - bg
        dR_step = geom.so3_exp(w_mid * dt)
        dR_next = dR @ dR_step
        a_body = 0.5 * (accels[k] + accels[k + 1]) - ba
        a_mid = 0.5 * (dR @ (accels[k] - ba) + dR_next @ (accels[k + 1] - ba))

        F[0:3, 0:3] = -geom.skew(w_mid)
        F[0:3, 3:6] = -I3
        dRa = dR @ geom.skew(a_body)
        F[6:9, 0:3] = -dRa
        F[6:9, 9:12] = -dR
        F[12:15, 6:9] = I3
        np.multiply(F, dt, out=Phi)
        Phi[range(15), range(15)] += 1.0
        cov = Phi @ cov @ Phi.T
        cov[0:3, 0:3] += (sg2 * dt) * I3
        cov[3:6, 3:6] += (swg2 * dt) * I3
        cov[6:9, 6:9] += (sa2 * dt) * I3   # dR Qa dR^T with isotropic Qa
        cov[9:12, 9:12] += (swa2 * dt) * I3
        cov = 0.5 * (cov + cov.T)

        # bias jacobians: exact first-order derivatives of the discrete update
        Jr = geom.right_jacobian(w_mid * dt)
        J_dr_bg_next = dR_step.T @ J_dr_bg - Jr * dt
        damid_bg = -0.5 * (dR @ geom.skew(accels[k] - ba) @ J_dr_bg
                           + dR_next @ geom.skew(accels[k + 1] - ba) @ J_dr_bg_next)
        damid_ba = -0.5 * (dR + dR_next)
        J_dp_bg = J_dp_bg + J_dv_bg * dt + 0.5 * damid_bg * dt * dt
        J_dp_ba = J_dp_ba + J_dv_ba * dt + 0.5 * damid_ba * dt * dt
        J_dv_bg = J_dv_bg + damid_bg * dt
        J_dv_ba = J_dv_ba + damid_ba * dt
        J_dr_bg = J_dr_bg_next

        dp = dp + dv * dt + 0.5 * a_mid * dt * dt
        dv = dv + a_mid * dt
        dR = dR_next

    return ImuPreintegrated(
        dt_total=float(stamps[-1] - stamps[0]),
        dR=dR, dv=dv, dp=dp, cov=cov,
        J_dr_bg=J_dr_bg, J_dv_bg=J_dv_bg, J_dv_ba=J_dv_ba,
        J_dp_bg=J_dp_bg, J_dp_ba=J_dp_ba,
        bg_lin=bg.copy(), ba_lin=ba.copy(),
    )


def bias_correct(pre, bg_new, ba_new):
    """First-order corrected (dR, dv, dp) at new bias estimates."""
    dbg = np.asarray(bg_new, dtype=float) - pre.bg_lin
    dba = np.asarray(ba_new, dtype=float) - pre.ba_lin
    dR = pre.dR @ geom.so3_exp(pre.J_dr_bg @ dbg)
    dv = pre.dv + pre.J_dv_bg @ dbg + pre.J_dv_ba @ dba
    dp = pre.dp + pre.J_dp_bg @ dbg + pre.J_dp_ba @ dba
    return dR, dv, dp


def sqrt_info(cov):
    """Inverse-Cholesky whitener of a covariance; clamps non-PSD input."""
    cov = 0.5 * (cov + cov.T)
    try:
        L = np.linalg.cholesky(cov)
        clamped = False
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(cov)
        evals = np.clip(evals, 1e-16, None)
        L = np.linalg.cholesky((evecs * evals) @ evecs.T)
        clamped = True
    W = np.linalg.inv(L)  # W @ r is the whitened residual
    return W, clamped


def residual(pre, R_gi, p_gi, v_gi, bg_i, ba_i, R_gj, p_gj, v_gj, bg_j, ba_j,
             gravity, whiten=None):
    """Raw 15-vector preintegration residual (order d_theta, d_bg, d_v, d_ba, d_p).

    ``R_g*`` are body-to-world rotations.  Pass a precomputed ``whiten`` matrix
    (from :func:`sqrt_info`) to get the whitened residual.
    """
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    dR, dv, dp = bias_correct(pre, bg_i, ba_i)
    r = np.empty(15)
    r[S_TH] = geom.so3_log(dR.T @ R_gi.T @ R_gj)
    r[S_BG] = bg_j - bg_i
    r[S_V] = R_gi.T @ (v_gj - v_gi - g * dt) - dv
    r[S_BA] = ba_j - ba_i
    r[S_P] = R_gi.T @ (p_gj - p_gi - v_gi * dt - 0.5 * g * dt * dt) - dp
    if whiten is not None:
        r = whiten @ r
    return r
