"""SO(3) and unit-sphere primitives shared by the calibration and odometry solvers.

Conventions used throughout the package:

* Rotations are plain 3x3 float64 arrays, orthonormal with det = +1.
  ``R_ab`` maps coordinates of frame ``b`` into coordinates of frame ``a``;
  ``p_ab`` is the origin of ``b`` expressed in ``a``.
* Tangent increments act on the right: ``R <- R @ so3_exp(delta)``.
* The minimal 3-vector form of a rotation is the Gibbs/Rodrigues vector
  ``s = tan(theta/2) * axis`` (``cgr_*`` helpers); it is used for file I/O
  and reporting, not as solver storage.
* Angles are wrapped to ``(-pi, pi]``.

Small-angle branches switch to 4th-order Taylor series below 1e-8 rad.
"""

import numpy as np

_EPS_ANGLE = 1e-8
_I3 = np.eye(3)
_I3.setflags(write=False)


class SphereChartError(ValueError):
    """Raised when a unit-sphere tangent chart is requested too close to its
    singularity at z = -1; the caller must re-chart first."""


def skew(v):
    """Map a 3-vector to the antisymmetric matrix with skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _exp_coeffs(theta):
    # A = sin(t)/t, B = (1-cos(t))/t^2; series below the small-angle threshold
    if theta < _EPS_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0, 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    return np.sin(theta) / theta, (1.0 - np.cos(theta)) / (theta * theta)


def so3_exp(phi):
    """Exponential map: rotation by angle ||phi|| about phi/||phi||."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    a_c, b_c = _exp_coeffs(theta)
    ph = skew(phi)
    return _I3 + a_c * ph + b_c * (ph @ ph)


def so3_exp_batch(phis):
    """Vectorized so3_exp for an (n, 3) array of tangents; returns (n, 3, 3)."""
    phis = np.asarray(phis, dtype=float)
    n = phis.shape[0]
    theta = np.linalg.norm(phis, axis=1)
    small = theta < _EPS_ANGLE
    t_safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a_c = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(theta) / t_safe)
    b_c = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                   (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    ph = np.zeros((n, 3, 3))
    ph[:, 0, 1] = -phis[:, 2]
    ph[:, 0, 2] = phis[:, 1]
    ph[:, 1, 0] = phis[:, 2]
    ph[:, 1, 2] = -phis[:, 0]
    ph[:, 2, 0] = -phis[:, 1]
    ph[:, 2, 1] = phis[:, 0]
    ph2 = ph @ ph
    return np.eye(3)[None] + a_c[:, None, None] * ph + b_c[:, None, None] * ph2


def so3_log_batch(Rs):
    """Vectorized log map for (n, 3, 3) rotations (angles kept below ~2.7)."""
    Rs = np.asarray(Rs, dtype=float)
    n = Rs.shape[0]
    tr = Rs[:, 0, 0] + Rs[:, 1, 1] + Rs[:, 2, 2]
    cos_t = np.clip((tr - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = 0.5 * np.stack([Rs[:, 2, 1] - Rs[:, 1, 2],
                        Rs[:, 0, 2] - Rs[:, 2, 0],
                        Rs[:, 1, 0] - Rs[:, 0, 1]], axis=1)
    small = theta < _EPS_ANGLE
    t_safe = np.where(small, 1.0, theta)
    f = np.where(small, 1.0, t_safe / np.maximum(np.sin(t_safe), 1e-12))
    out = w * f[:, None]
    obtuse = cos_t < -0.4
    if np.any(obtuse):
        for i in np.nonzero(obtuse)[0]:
            out[i] = so3_log(Rs[i])
    return out


def so3_log(R, with_flag=False):
    """Log map returning the rotation vector with angle in [0, pi].

    With ``with_flag=True`` also returns True when the angle is within 1e-9 of
    pi, where the axis sign is ambiguous (the returned value is still a valid
    preimage under so3_exp).
    """
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    # w = sin(theta) * axis
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < _EPS_ANGLE:
        v = w
    elif cos_t > -0.4:
        v = w * (theta / np.sin(theta))
    else:
        # obtuse rotations: arccos and the skew part are ill-conditioned, so
        # recover the axis from the symmetric part
        # (R + R^T)/2 = cos(t) I + (1 - cos(t)) a a^T and the angle via arcsin.
        S = 0.5 * (R + R.T)
        denom = 1.0 - cos_t
        diag = np.clip(np.diagonal(S) - cos_t, 0.0, None) / denom
        k = int(np.argmax(diag))
        a = np.empty(3)
        a[k] = np.sqrt(diag[k])
        for i in range(3):
            if i != k:
                a[i] = S[i, k] / (denom * a[k])
        a /= np.linalg.norm(a)
        sn = np.linalg.norm(w)
        theta = np.pi - np.arcsin(min(sn, 1.0))
        if sn > 1e-12:
            a = a if np.dot(a, w) > 0 else -a
        else:
            # canonical sign at exactly pi: largest-magnitude component positive
            j = int(np.argmax(np.abs(a)))
            if a[j] < 0:
                a = -a
        v = theta * a
    if with_flag:
        return v, bool(theta > np.pi - 1e-9)
    return v


def right_jacobian(phi):
    """Right Jacobian of SO(3): exp(phi + d) ~= exp(phi) @ exp(right_jacobian(phi) @ d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    ph = skew(phi)
    if theta < _EPS_ANGLE:
        t2 = theta * theta
        c1 = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c2 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        t2 = theta * theta
        c1 = (1.0 - np.cos(theta)) / t2
        c2 = (theta - np.sin(theta)) / (t2 * theta)
    return _I3 - c1 * ph + c2 * (ph @ ph)


def right_jacobian_inv(phi):
    """Inverse of the right Jacobian (valid for ||phi|| < 2*pi)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    ph = skew(phi)
    if theta < 1e-4:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        half = 0.5 * theta
        # 1/t^2 - (1+cos t)/(2 t sin t), rewritten with cot(t/2) for stability near pi
        c = 1.0 / (theta * theta) - np.cos(half) / (2.0 * theta * np.sin(half))
    return _I3 + 0.5 * ph + c * (ph @ ph)


def left_jacobian_inv(phi):
    """Inverse left Jacobian; equals right_jacobian_inv(-phi)."""
    return right_jacobian_inv(-np.asarray(phi, dtype=float))


def right_jacobian_inv_batch(phis):
    """Vectorized right_jacobian_inv for an (n, 3) array of tangents."""
    phis = np.asarray(phis, dtype=float)
    n = phis.shape[0]
    theta = np.linalg.norm(phis, axis=1)
    small = theta < 1e-4
    t_safe = np.where(small, 1.0, theta)
    half = 0.5 * t_safe
    c_series = 1.0 / 12.0 + theta * theta / 720.0
    c_full = 1.0 / (t_safe * t_safe) - np.cos(half) / (2.0 * t_safe * np.sin(half))
    c = np.where(small, c_series, c_full)
    ph = np.zeros((n, 3, 3))
    ph[:, 0, 1] = -phis[:, 2]
    ph[:, 0, 2] = phis[:, 1]
    ph[:, 1, 0] = phis[:, 2]
    ph[:, 1, 2] = -phis[:, 0]
    ph[:, 2, 0] = -phis[:, 1]
    ph[:, 2, 1] = phis[:, 0]
    return np.eye(3)[None] + 0.5 * ph + c[:, None, None] * (ph @ ph)


def cgr_to_matrix(s):
    """Rotation matrix of a Gibbs/Rodrigues vector s = tan(theta/2) * axis."""
    s = np.asarray(s, dtype=float)
    n2 = float(np.dot(s, s))
    return ((1.0 - n2) * np.eye(3) + 2.0 * np.outer(s, s) + 2.0 * skew(s)) / (1.0 + n2)


def cgr_from_matrix(R):
    """Gibbs/Rodrigues vector of a rotation; diverges as the angle approaches pi."""
    v = so3_log(R)
    theta = np.linalg.norm(v)
    if theta < _EPS_ANGLE:
        t2 = theta * theta
        f = 0.5 + t2 / 24.0 + t2 * t2 / 240.0
    else:
        f = np.tan(0.5 * theta) / theta
    return f * v


def sphere_basis(x):
    """3x2 orthonormal basis of the tangent plane at a unit vector x.

    Singular at z = -1; callers must re-chart (rotate) before reaching it.
    """
    x = np.asarray(x, dtype=float)
    z1 = 1.0 + x[2]
    if z1 <= 1e-9:
        raise SphereChartError("tangent basis singular near z = -1; re-chart required")
    return np.array([
        [1.0 - x[0] * x[0] / z1, -x[0] * x[1] / z1],
        [-x[0] * x[1] / z1, 1.0 - x[1] * x[1] / z1],
        [-x[0], -x[1]],
    ])


def sphere_boxplus(x, delta):
    """Perturb a unit vector inside its tangent chart: exp((B_x @ delta)^) @ x."""
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    w = sphere_basis(x) @ delta
    return so3_exp(w) @ x


def sphere_boxminus(x, ref):
    """Chart coordinates of x in the tangent plane at ref (inverse of boxplus)."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    c = np.cross(ref, x)
    s = np.linalg.norm(c)
    ang = np.arctan2(s, np.clip(np.dot(ref, x), -1.0, 1.0))
    if s < 1e-15:
        w = np.zeros(3)
    else:
        w = (ang / s) * c
    return sphere_basis(ref).T @ w


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to (-pi, pi]."""
    w = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(theta) == 0:
        return float(w)
    return w


def angle_about_axis_full(R, axis):
    """Signed rotation angle of R about a unit axis, plus the off-axis log norm.

    The second return value measures how far R is from a pure rotation about
    ``axis``; callers treat values above ~1e-3 rad as an inconsistent-axis flag.
    """
    axis = np.asarray(axis, dtype=float)
    v = so3_log(R)
    phi = float(np.dot(axis, v))
    off = float(np.linalg.norm(v - phi * axis))
    if phi == -np.pi:
        phi = np.pi
    return phi, off


def angle_about_axis(R, axis):
    """Signed angle in (-pi, pi] of a rotation (approximately) about ``axis``."""
    return angle_about_axis_full(R, axis)[0]


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    return (np.abs(R @ R.T - np.eye(3)).max() < tol) and (abs(np.linalg.det(R) - 1.0) < tol)


def random_rotation(rng, max_angle=np.pi - 0.1):
    """Uniform-axis random rotation with angle in [0, max_angle) (test helper)."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)
