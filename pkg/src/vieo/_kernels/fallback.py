"""Pure-numpy implementation of the hot visual-factor kernel.

The compiled extension (``native.pyx``) mirrors this function exactly; the
kernel-agreement tests assert both paths produce matching results.
"""

import numpy as np

NATIVE = False


def visual_eval(R_gi_i, p_gi_i, R_ic_i, p_ic_i, R_gi_j, p_gi_j, R_ic_j, p_ic_j,
                inv_depth, anchor_uv, obs_uv, weight, min_depth, with_jac):
    """Batched inverse-depth reprojection residuals and jacobians.

    Chain per row (anchor frame i, observing frame j):

        x0 = [u_a, v_a, 1] / lam                (anchor camera)
        x1 = R_ic_i x0 + p_ic_i                 (IMU i)
        x2 = R_gi_i x1 + p_gi_i                 (world)
        x3 = R_gi_j^T (x2 - p_gi_j)             (IMU j)
        x4 = R_ic_j^T (x3 - p_ic_j)             (camera j)
        r  = weight * (x4.xy / x4.z - obs_uv)

    Returns ``(res (n,2), jac (n,2,25) or None, valid (n,))`` with jacobian
    columns [rot_i, pos_i, erot_i, epos_i, rot_j, pos_j, erot_j, epos_j, lam]
    in each block's right-perturbation / vector chart.  Rows behind the
    camera (x4.z <= min_depth) or with non-positive inverse depth are gated.
    """
    n = len(inv_depth)
    lam = inv_depth
    valid = lam > 1e-6
    lam_safe = np.where(valid, lam, 1.0)

    h = np.concatenate([anchor_uv, np.ones((n, 1))], axis=1)
    x0 = h / lam_safe[:, None]
    x1 = np.einsum("nij,nj->ni", R_ic_i, x0) + p_ic_i
    x2 = np.einsum("nij,nj->ni", R_gi_i, x1) + p_gi_i
    x3 = np.einsum("nji,nj->ni", R_gi_j, x2 - p_gi_j)
    x4 = np.einsum("nji,nj->ni", R_ic_j, x3 - p_ic_j)

    z = x4[:, 2]
    valid &= z > min_depth
    z_safe = np.where(valid, z, 1.0)
    res = weight * (x4[:, :2] / z_safe[:, None] - obs_uv)
    res = np.where(valid[:, None], res, 0.0)
    if not with_jac:
        return res, None, valid

    # P = d r / d x4  (2x3 per row)
    P = np.zeros((n, 2, 3))
    inv_z = weight / z_safe
    P[:, 0, 0] = inv_z
    P[:, 1, 1] = inv_z
    P[:, 0, 2] = -inv_z * x4[:, 0] / z_safe
    P[:, 1, 2] = -inv_z * x4[:, 1] / z_safe

    RicjT = np.transpose(R_ic_j, (0, 2, 1))
    RgijT = np.transpose(R_gi_j, (0, 2, 1))
    PR = _mm(P, RicjT)          # d r / d x3
    A = _mm(PR, RgijT)          # d r / d x2
    B = _mm(A, R_gi_i)          # d r / d x1
    C = _mm(B, R_ic_i)          # d r / d x0

    jac = np.zeros((n, 2, 25))
    jac[:, :, 0:3] = -_mm(B, _batch_skew(x1))
    jac[:, :, 3:6] = A
    jac[:, :, 6:9] = -_mm(C, _batch_skew(x0))
    jac[:, :, 9:12] = B
    jac[:, :, 12:15] = _mm(PR, _batch_skew(x3))
    jac[:, :, 15:18] = -_mm(PR, RgijT)
    jac[:, :, 18:21] = _mm(P, _batch_skew(x4))
    jac[:, :, 21:24] = -_mm(P, RicjT)
    jac[:, :, 24] = np.einsum("nab,nb->na", C, -x0 / lam_safe[:, None])
    jac[~valid] = 0.0
    return res, jac, valid


def _mm(a, b):
    return np.einsum("nab,nbc->nac", a, b)


def _batch_skew(v):
    n = len(v)
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S
