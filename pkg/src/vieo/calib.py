"""Spin-axis / extrinsic calibration from camera-IMU pose observations.

Each observation is the camera pose w.r.t. the IMU measured at a known
nominal spin angle.  The model predicts

    R_ic(theta) = exp(theta a^) R_ie          (camera-to-IMU rotation)
    p_ic(theta) = p_ie + exp(theta a^) p_ec   (camera origin in I)

and calibration recovers the axis ``a`` (unit sphere), the zero-angle
rotation ``R_ie`` (SO(3), right perturbation), the lever arms ``p_ie`` /
``p_ec`` and the per-observation angles (first angle frozen: adding a common
offset to all angles while counter-rotating ``R_ie`` about the axis leaves
the attitude residuals unchanged, so that direction is gauge).

The position model has a second gauge: ``exp(theta a^) a = a``, so the
axis-parallel component of ``p_ec`` trades off freely against ``p_ie``.
Results are returned in the canonical gauge ``p_ec`` perpendicular to the
axis (``canonicalize``).

Attitude residuals stack the prediction-measurement matrix difference
applied to all three canonical basis vectors (a 9-vector), keeping the
constraint full rank without an arbitrary projection direction.
"""

from dataclasses import dataclass

import numpy as np

from . import geom
from .sim import ViDarExtrinsics
from .solver import SO3, SPHERE, Block, Factor, Problem, SolveOptions


class CalibrationError(ValueError):
    pass


@dataclass
class CalibObservation:
    theta_nom: float        # nominal spin angle from the encoder, rad
    R_ic: np.ndarray        # measured camera-to-IMU rotation
    p_ic: np.ndarray        # measured camera origin in I, m
    index: int = 0          # position in the observation list (selects theta_i)


@dataclass
class CalibState:
    thetas: np.ndarray
    axis: np.ndarray
    R_ie: np.ndarray
    p_ie: np.ndarray
    p_ec: np.ndarray

    @property
    def extrinsics(self):
        return ViDarExtrinsics(
            axis=tuple(self.axis), s_ie=tuple(geom.cgr_from_matrix(self.R_ie)),
            p_ie=tuple(self.p_ie), p_ec=tuple(self.p_ec))


def _vec_cols(M):
    """Stack M @ e1, M @ e2, M @ e3 into a 9-vector (column-major ravel)."""
    return M.ravel(order="F")


def _dE_daxis(theta, axis):
    """Derivatives of exp(theta a^) w.r.t. the 2-dim sphere chart of a.

    Rodrigues is explicit in the axis:
    E = cos(t) I + (1 - cos(t)) a a^T + sin(t) a^, so
    dE = (1 - cos(t)) (da a^T + a da^T) + sin(t) da^  with da = -a^ B_a d.
    Returns a list of two 3x3 matrices.
    """
    B = geom.sphere_basis(axis)
    da_cols = -geom.skew(axis) @ B
    ct, st = np.cos(theta), np.sin(theta)
    out = []
    for j in range(2):
        da = da_cols[:, j]
        out.append((1.0 - ct) * (np.outer(da, axis) + np.outer(axis, da))
                   + st * geom.skew(da))
    return out


class AttitudeFactor(Factor):
    """9-vector residual (exp(theta a^) R_ie - R_ic_meas) applied to e1..e3."""

    dim = 9

    def __init__(self, obs, th_blk, axis_blk, rot_blk, weight, name=""):
        self.obs = obs
        self.blocks = [th_blk, axis_blk, rot_blk]
        self.weight = weight
        self.name = name

    def eval(self, with_jac=False):
        th = float(self.blocks[0].value[0])
        axis = self.blocks[1].value
        R_ie = self.blocks[2].value
        E = geom.so3_exp(th * axis)
        M = E @ R_ie - self.obs.R_ic
        r = self.weight * _vec_cols(M)
        if not with_jac:
            return r, None
        J_th = self.weight * _vec_cols(geom.skew(axis) @ E @ R_ie).reshape(9, 1)
        J_axis = np.empty((9, 2))
        for j, dE in enumerate(_dE_daxis(th, axis)):
            J_axis[:, j] = self.weight * _vec_cols(dE @ R_ie)
        J_rot = np.empty((9, 3))
        ER = E @ R_ie
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            J_rot[:, k] = self.weight * _vec_cols(ER @ geom.skew(e))
        return r, [J_th, J_axis, J_rot]


class PositionFactor(Factor):
    """3-vector residual p_ie + exp(theta a^) p_ec - p_ic_meas."""

    dim = 3

    def __init__(self, obs, th_blk, axis_blk, pie_blk, pec_blk, weight, name=""):
        self.obs = obs
        self.blocks = [th_blk, axis_blk, pie_blk, pec_blk]
        self.weight = weight
        self.name = name

    def eval(self, with_jac=False):
        th = float(self.blocks[0].value[0])
        axis = self.blocks[1].value
        p_ie = self.blocks[2].value
        p_ec = self.blocks[3].value
        E = geom.so3_exp(th * axis)
        r = self.weight * (p_ie + E @ p_ec - self.obs.p_ic)
        if not with_jac:
            return r, None
        J_th = (self.weight * (geom.skew(axis) @ E @ p_ec)).reshape(3, 1)
        J_axis = np.empty((3, 2))
        for j, dE in enumerate(_dE_daxis(th, axis)):
            J_axis[:, j] = self.weight * (dE @ p_ec)
        J_pie = self.weight * np.eye(3)
        J_pec = self.weight * E
        return r, [J_th, J_axis, J_pie, J_pec]


def attitude_residual(obs, state):
    """Raw (unweighted) 9-vector attitude residual at a CalibState."""
    i = _obs_index(obs, state)
    E = geom.so3_exp(state.thetas[i] * state.axis)
    return _vec_cols(E @ state.R_ie - obs.R_ic)


def position_residual(obs, state):
    i = _obs_index(obs, state)
    E = geom.so3_exp(state.thetas[i] * state.axis)
    return state.p_ie + E @ state.p_ec - obs.p_ic


def _obs_index(obs, state):
    return obs.index


def canonicalize(state):
    """Move the axis-parallel part of p_ec into p_ie (gauge fix, in place)."""
    c = float(np.dot(state.axis, state.p_ec))
    state.p_ec = state.p_ec - c * state.axis
    state.p_ie = state.p_ie + c * state.axis
    return state


def initialize(observations):
    """Closed-form starting point.

    Axis: weighted average of normalized relative-rotation logs with signs
    from the nominal angle differences.  Angles: encoder nominals.  R_ie: the
    observation nearest zero angle back-rotated.  Lever arms: linear least
    squares of the position model at the fixed axis/angles.
    """
    if len(observations) < 3:
        raise CalibrationError("need at least 3 observations")
    th = np.array([o.theta_nom for o in observations])
    if th.max() - th.min() < np.deg2rad(20.0):
        raise CalibrationError("angle span too small; spin axis unobservable")

    acc = np.zeros(3)
    for i in range(len(observations)):
        for j in range(i + 1, len(observations)):
            # the log map sees the wrapped angle difference; skip pairs near
            # 0 (no signal) and near +-pi (sign ambiguous)
            dth = geom.wrap_angle(th[i] - th[j])
            if abs(dth) < np.deg2rad(5.0) or abs(dth) > np.pi - np.deg2rad(5.0):
                continue
            v = geom.so3_log(observations[i].R_ic @ observations[j].R_ic.T)
            n = np.linalg.norm(v)
            if n < 1e-12:
                continue
            acc += np.sign(dth) * v / n * abs(dth)
    n = np.linalg.norm(acc)
    if n < 1e-9:
        raise CalibrationError("relative rotations do not determine an axis")
    axis = acc / n

    k0 = int(np.argmin(np.abs(th)))
    R_ie = geom.so3_exp(-th[k0] * axis) @ observations[k0].R_ic

    A = np.zeros((3 * len(observations), 6))
    b = np.zeros(3 * len(observations))
    for i, o in enumerate(observations):
        E = geom.so3_exp(th[i] * axis)
        A[3 * i:3 * i + 3, 0:3] = np.eye(3)
        A[3 * i:3 * i + 3, 3:6] = E
        b[3 * i:3 * i + 3] = o.p_ic
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)

    for i, o in enumerate(observations):
        o.index = i
    return canonicalize(CalibState(thetas=th.copy(), axis=axis, R_ie=R_ie,
                                   p_ie=sol[:3], p_ec=sol[3:]))


def build_problem(observations, state, sigma_rot, sigma_pos):
    """Problem over (thetas[1:], axis, R_ie, p_ie, p_ec); theta_0 frozen as gauge."""
    th_blocks = [Block(np.array([t]), frozen=(i == 0), name="theta%d" % i)
                 for i, t in enumerate(state.thetas)]
    axis_blk = Block(state.axis.copy(), manifold=SPHERE, name="axis")
    rot_blk = Block(state.R_ie.copy(), manifold=SO3, name="s_ie")
    pie_blk = Block(state.p_ie.copy(), name="p_ie")
    pec_blk = Block(state.p_ec.copy(), name="p_ec")
    p = Problem()
    for i, o in enumerate(observations):
        p.add(AttitudeFactor(o, th_blocks[i], axis_blk, rot_blk,
                             1.0 / sigma_rot, name="att%d" % i))
        p.add(PositionFactor(o, th_blocks[i], axis_blk, pie_blk, pec_blk,
                             1.0 / sigma_pos, name="pos%d" % i))
    blocks = dict(thetas=th_blocks, axis=axis_blk, rot=rot_blk,
                  p_ie=pie_blk, p_ec=pec_blk)
    return p, blocks


def calibrate(observations, sigma_rot=np.deg2rad(0.1), sigma_pos=1e-3,
              options=None):
    """Initialize then refine; returns (CalibState, SolveReport)."""
    state = initialize(observations)
    p, blocks = build_problem(observations, state, sigma_rot, sigma_pos)
    report = p.solve(options or SolveOptions(max_iterations=100))
    out = CalibState(
        thetas=np.array([b.value[0] for b in blocks["thetas"]]),
        axis=blocks["axis"].value.copy(),
        R_ie=blocks["rot"].value.copy(),
        p_ie=blocks["p_ie"].value.copy(),
        p_ec=blocks["p_ec"].value.copy(),
    )
    for i, o in enumerate(observations):
        o.index = i
    return canonicalize(out), report


def synthetic_observations(extr, thetas, sigma_rot=0.0, sigma_pos=0.0, seed=0):
    """Noisy pose observations of a known rig (tests and demos)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    out = []
    for i, th in enumerate(thetas):
        R = extr.camera_rotation(th)
        p = extr.camera_position(th)
        if sigma_rot > 0:
            R = R @ geom.so3_exp(rng.normal(scale=sigma_rot, size=3))
        if sigma_pos > 0:
            p = p + rng.normal(scale=sigma_pos, size=3)
        out.append(CalibObservation(theta_nom=float(th), R_ic=R,
                                    p_ic=np.asarray(p), index=i))
    return out


# ------------------------------------------------------------ file format

CALIB_FORMAT = "vieo-calibration"
CALIB_VERSION = "1"
_REQUIRED = ("axis", "s_ie", "p_ie", "p_ec")


def export_calibration(extr, path, stats=None):
    """Write the calibration file (UTF-8 key = value lines)."""
    lines = ["format = %s" % CALIB_FORMAT, "version = %s" % CALIB_VERSION]
    lines.append("axis = %s" % " ".join(repr(float(x)) for x in extr.axis))
    lines.append("s_ie = %s" % " ".join(repr(float(x)) for x in extr.s_ie))
    lines.append("p_ie = %s" % " ".join(repr(float(x)) for x in extr.p_ie))
    lines.append("p_ec = %s" % " ".join(repr(float(x)) for x in extr.p_ec))
    for k in sorted(stats or {}):
        lines.append("%s = %s" % (k, stats[k]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def import_calibration(path):
    """Read a calibration file; returns (ViDarExtrinsics, meta dict)."""
    meta = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), 1):
            if not line.strip():
                continue
            if " = " not in line:
                raise CalibrationError("calibration line %d: expected 'key = value'" % lineno)
            k, v = line.split(" = ", 1)
            meta[k.strip()] = v.strip()
    if meta.get("format") != CALIB_FORMAT:
        raise CalibrationError("not a %s file" % CALIB_FORMAT)
    for k in _REQUIRED:
        if k not in meta:
            raise CalibrationError("calibration file missing field %r" % k)
    extr = ViDarExtrinsics(
        axis=tuple(float(x) for x in meta["axis"].split()),
        s_ie=tuple(float(x) for x in meta["s_ie"].split()),
        p_ie=tuple(float(x) for x in meta["p_ie"].split()),
        p_ec=tuple(float(x) for x in meta["p_ec"].split()),
    )
    return extr, meta
