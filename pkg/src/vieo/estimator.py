"""Tightly coupled sliding-window visual-inertial-encoder odometry.

State per frame: body pose (R_gi body-to-world, p_gi), velocity, IMU biases,
and the per-frame camera extrinsic block (R_ic, p_ic) that the encoder
residuals softly constrain to the calibrated spin model.  Landmarks use
inverse depth along their anchor-keyframe bearing.

Residuals in the window problem:

* marginalization prior (linear, from Schur elimination of retired frames)
* IMU preintegration between consecutive window frames (15-dim)
* extrinsic process chain: the next extrinsic block predicted by rotating the
  previous one through the measured encoder increment, whitened by the
  encoder-noise process covariance
* absolute encoder residuals per frame:
    r1 = log(R_ic R_ie^T) - theta * a          (axis-anisotropic whitening)
    r2 = exp(theta a^) p_ec + p_ie - p_ic
  and the relative scalar  r = phi_j - phi_i - (theta_j - theta_i)  wrapped
  to (-pi, pi]
* inverse-depth reprojection (Huber), batched through the hot kernel
* loop reprojection against frozen retired keyframes matched by landmark-id
  covisibility after a tracking gap

Gauge: the oldest keyframe's pose blocks are frozen; with encoder residuals
disabled the oldest extrinsic block is frozen too (otherwise the camera
mount is a free 6-DoF gauge).  Keyframe selection uses rotation-compensated
parallax, which is what makes a spinning camera tractable: raw image motion
would promote every frame during fast spin and starve triangulation.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geom, preint
from ._kernels import visual_eval
from .calib import import_calibration
from .solver import (SO3, BatchFactor, Block, Factor, Problem, SolveOptions)

GRAVITY_NOMINAL = 9.81


class InitializationError(RuntimeError):
    pass


@dataclass
class NoiseConfig:
    """Process/measurement noise densities used for whitening (all > 0)."""
    gyro: float = 1e-3
    gyro_walk: float = 1e-5
    accel: float = 1e-2
    accel_walk: float = 1e-4
    enc_angle: float = 2.0 * np.pi / 4096.0 / np.sqrt(12.0)   # std, rad
    enc_rate: float = 0.05                                    # std, rad/s

    @classmethod
    def from_meta(cls, meta):
        q = float(meta.get("enc_quant", 0.0))
        return cls(
            gyro=max(float(meta["gyro_noise"]), 1e-6),
            gyro_walk=max(float(meta["gyro_walk"]), 1e-8),
            accel=max(float(meta["accel_noise"]), 1e-5),
            accel_walk=max(float(meta["accel_walk"]), 1e-8),
            enc_angle=max(q / np.sqrt(12.0), 1e-6),
            enc_rate=0.05,
        )

    def __post_init__(self):
        for f in ("gyro", "gyro_walk", "accel", "accel_walk", "enc_angle", "enc_rate"):
            if getattr(self, f) <= 0:
                raise ValueError("noise density %s must be positive" % f)


@dataclass
class EstimatorConfig:
    window: int = 10                       # keyframes (plus one latest frame)
    parallax_thresh: float = 10.0 / 460.0  # rotation-compensated, normalized
    min_tracked: int = 50
    huber: float = 1.0
    triang_parallax: float = 4.0 / 460.0   # ray angle needed to triangulate
    min_cam_depth: float = 0.05
    use_encoder: bool = True
    optimize_extrinsics: bool = True
    use_loops: bool = True
    loop_min_shared: int = 20
    loop_gap: float = 3.0                  # s without sightings => re-observation
    loop_min_reobs: int = 10
    loop_max_factors: int = 40
    loop_base_radius: float = 0.5          # m, self- vs cross-loop split
    enc_sigma_perp: float = 1e-3           # rad, off-axis slack of r1
    enc_sigma_pos: float = 5e-4            # m, slack of r2
    max_iterations: int = 8
    bootstrap_window: float = 1.0          # s of stationary IMU for init
    prior_sigma_v: float = 1e-3            # stationary-start velocity prior, m/s
    prior_sigma_bg: float = 2e-3           # rad/s
    prior_sigma_ba: float = 2e-2           # m/s^2


class FrameState:
    """Blocks of one window frame."""

    __slots__ = ("t", "theta", "is_keyframe", "rot", "pos", "vel", "bg", "ba",
                 "erot", "epos", "obs_ids", "obs_uv",
                 "_pre_to_next", "_pre_to_t")

    def __init__(self, t, theta, R_gi, p_gi, v_gi, bg, ba, R_ic, p_ic):
        self.t = t
        self.theta = theta                 # measured spin angle, wrapped
        self.is_keyframe = False
        self.rot = Block(R_gi, manifold=SO3, name="rot")
        self.pos = Block(p_gi, name="pos")
        self.vel = Block(v_gi, name="vel")
        self.bg = Block(bg, name="bg")
        self.ba = Block(ba, name="ba")
        self.erot = Block(R_ic, manifold=SO3, name="erot")
        self.epos = Block(p_ic, name="epos")
        self.obs_ids = None
        self.obs_uv = None

    def camera_pose(self):
        R_gc = self.rot.value @ self.erot.value
        p_gc = self.pos.value + self.rot.value @ self.epos.value
        return R_gc, p_gc


class LandmarkTrack:
    __slots__ = ("lid", "anchor", "anchor_uv", "lam", "ready", "obs")

    def __init__(self, lid, anchor, anchor_uv):
        self.lid = lid
        self.anchor = anchor
        self.anchor_uv = np.asarray(anchor_uv, dtype=float)
        self.lam = Block(np.array([0.0]), name="lam%d" % lid)
        self.ready = False
        self.obs = {}        # id(FrameState) -> (frame, uv)


class HistoryFrame:
    """Frozen snapshot of a retired keyframe used for loop residuals."""

    __slots__ = ("t", "theta", "rot", "pos", "erot", "epos", "ids", "uv_by_id")

    def __init__(self, frame):
        self.t = frame.t
        self.theta = frame.theta
        self.rot = Block(frame.rot.value.copy(), manifold=SO3, frozen=True, name="hrot")
        self.pos = Block(frame.pos.value.copy(), frozen=True, name="hpos")
        self.erot = Block(frame.erot.value.copy(), manifold=SO3, frozen=True, name="herot")
        self.epos = Block(frame.epos.value.copy(), frozen=True, name="hepos")
        self.ids = frozenset(int(i) for i in frame.obs_ids)
        self.uv_by_id = {int(i): frame.obs_uv[k] for k, i in enumerate(frame.obs_ids)}


# ---------------------------------------------------------------- factors

class PreintFactor(Factor):
    """Whitened 15-dim preintegration residual between two frames."""

    dim = 15

    def __init__(self, fi, fj, pre, gravity, name=""):
        self.fi = fi
        self.fj = fj
        self.pre = pre
        self.gravity = np.asarray(gravity, dtype=float)
        self.blocks = [fi.rot, fi.pos, fi.vel, fi.bg, fi.ba,
                       fj.rot, fj.pos, fj.vel, fj.bg, fj.ba]
        W, _ = preint.sqrt_info(pre.cov)
        self.W = W
        self.name = name

    def eval(self, with_jac=False):
        fi, fj, pre_ = self.fi, self.fj, self.pre
        Ri = fi.rot.value
        Rj = fj.rot.value
        g = self.gravity
        dt = pre_.dt_total
        bg_i = fi.bg.value
        ba_i = fi.ba.value
        r = preint.residual(pre_, Ri, fi.pos.value, fi.vel.value, bg_i, ba_i,
                            Rj, fj.pos.value, fj.vel.value, fj.bg.value, fj.ba.value,
                            g)
        if not with_jac:
            return self.W @ r, None
        S = preint
        rth = r[S.S_TH]
        Jr_inv = geom.right_jacobian_inv(rth)
        RjTRi = Rj.T @ Ri
        yv = fj.vel.value - fi.vel.value - g * dt
        yp = fj.pos.value - fi.pos.value - fi.vel.value * dt - 0.5 * g * dt * dt

        Js = [np.zeros((15, 3)) for _ in range(10)]
        # rot_i
        Js[0][S.S_TH] = -Jr_inv @ RjTRi
        Js[0][S.S_V] = geom.skew(Ri.T @ yv)
        Js[0][S.S_P] = geom.skew(Ri.T @ yp)
        # pos_i
        Js[1][S.S_P] = -Ri.T
        # vel_i
        Js[2][S.S_V] = -Ri.T
        Js[2][S.S_P] = -Ri.T * dt
        # bg_i: exact derivative through the bias-corrected rotation increment
        phi0 = pre_.J_dr_bg @ (bg_i - pre_.bg_lin)
        Q = pre_.dR.T @ Ri.T @ Rj
        Js[3][S.S_TH] = -Jr_inv @ Q.T @ geom.right_jacobian(-phi0) @ pre_.J_dr_bg
        Js[3][S.S_BG] = -np.eye(3)
        Js[3][S.S_V] = -pre_.J_dv_bg
        Js[3][S.S_P] = -pre_.J_dp_bg
        # ba_i
        Js[4][S.S_V] = -pre_.J_dv_ba
        Js[4][S.S_P] = -pre_.J_dp_ba
        Js[4][S.S_BA] = -np.eye(3)
        # rot_j / pos_j / vel_j / bg_j / ba_j
        Js[5][S.S_TH] = Jr_inv
        Js[6][S.S_P] = Ri.T
        Js[7][S.S_V] = Ri.T
        Js[8][S.S_BG] = np.eye(3)
        Js[9][S.S_BA] = np.eye(3)
        return self.W @ r, [self.W @ J for J in Js]


class ExtrinsicChainFactor(Factor):
    """Extrinsic block propagated through the measured encoder increment.

    Process covariance from the encoder rows of the error-state model: a
    scalar angle error (rate noise integrated over dt plus two angle reads)
    drives the rotation about the axis and the lever arm through
    d/d theta exp(theta a^) p_ec.
    """

    dim = 6

    def __init__(self, fi, fj, extr, noise, name=""):
        self.fi = fi
        self.fj = fj
        self.blocks = [fi.erot, fi.epos, fj.erot, fj.epos]
        self.axis = extr.axis_v
        self.p_ie = np.asarray(extr.p_ie, dtype=float)
        self.dtheta = geom.wrap_angle(fj.theta - fi.theta)
        self.E = geom.so3_exp(self.dtheta * self.axis)
        dt = fj.t - fi.t
        sig2 = noise.enc_rate ** 2 * dt + 2.0 * noise.enc_angle ** 2
        lever = self.E @ (np.asarray(extr.p_ec, dtype=float))
        m = np.concatenate([self.axis, np.cross(self.axis, lever)])
        Q = np.outer(m, m) * sig2 + np.diag([1e-10] * 3 + [1e-12] * 3)
        W, _ = preint.sqrt_info(Q)
        self.W = W
        self.name = name

    def eval(self, with_jac=False):
        Ri = self.fi.erot.value
        Rj = self.fj.erot.value
        pred_R = self.E @ Ri
        pred_p = self.p_ie + self.E @ (self.fi.epos.value - self.p_ie)
        psi = geom.so3_log(pred_R.T @ Rj)
        r = np.concatenate([psi, self.fj.epos.value - pred_p])
        if not with_jac:
            return self.W @ r, None
        J_ri = np.zeros((6, 3))
        J_ri[:3] = -geom.left_jacobian_inv(psi)
        J_pi = np.zeros((6, 3))
        J_pi[3:] = -self.E
        J_rj = np.zeros((6, 3))
        J_rj[:3] = geom.right_jacobian_inv(psi)
        J_pj = np.zeros((6, 3))
        J_pj[3:] = np.eye(3)
        return self.W @ r, [self.W @ J_ri, self.W @ J_pi, self.W @ J_rj, self.W @ J_pj]


class EncoderRotFactor(Factor):
    """r = log(R_ic R_ie^T) - theta a, with the along-axis difference wrapped."""

    dim = 3

    def __init__(self, frame, extr, noise, sigma_perp, name=""):
        self.frame = frame
        self.blocks = [frame.erot]
        self.axis = extr.axis_v
        self.R_ie = extr.R_ie
        self.theta = frame.theta
        a_outer = np.outer(self.axis, self.axis)
        self.W = a_outer / noise.enc_angle + (np.eye(3) - a_outer) / sigma_perp
        self.name = name

    def eval(self, with_jac=False):
        v = geom.so3_log(self.frame.erot.value @ self.R_ie.T)
        k = np.round((np.dot(v, self.axis) - self.theta) / (2.0 * np.pi))
        r = v - (self.theta + 2.0 * np.pi * k) * self.axis
        if not with_jac:
            return self.W @ r, None
        J = geom.right_jacobian_inv(v) @ self.R_ie
        return self.W @ r, [self.W @ J]


class EncoderPosFactor(Factor):
    """r = exp(theta a^) p_ec + p_ie - p_ic."""

    dim = 3

    def __init__(self, frame, extr, sigma_pos, name=""):
        self.frame = frame
        self.blocks = [frame.epos]
        pred = (np.asarray(extr.p_ie, dtype=float)
                + geom.so3_exp(frame.theta * extr.axis_v) @ np.asarray(extr.p_ec, dtype=float))
        self.pred = pred
        self.w = 1.0 / sigma_pos
        self.name = name

    def eval(self, with_jac=False):
        r = self.w * (self.pred - self.frame.epos.value)
        if not with_jac:
            return r, None
        return r, [-self.w * np.eye(3)]


class EncoderRelFactor(Factor):
    """Scalar r = wrap(phi_j - phi_i - (theta_j - theta_i))."""

    dim = 1

    def __init__(self, fi, fj, extr, noise, name=""):
        self.fi = fi
        self.fj = fj
        self.blocks = [fi.erot, fj.erot]
        self.axis = extr.axis_v
        self.R_ie = extr.R_ie
        self.dtheta = geom.wrap_angle(fj.theta - fi.theta)
        self.w = 1.0 / (np.sqrt(2.0) * noise.enc_angle)
        self.name = name

    def eval(self, with_jac=False):
        vi = geom.so3_log(self.fi.erot.value @ self.R_ie.T)
        vj = geom.so3_log(self.fj.erot.value @ self.R_ie.T)
        phi_i = float(np.dot(self.axis, vi))
        phi_j = float(np.dot(self.axis, vj))
        r = np.array([self.w * geom.wrap_angle(phi_j - phi_i - self.dtheta)])
        if not with_jac:
            return r, None
        Ji = -(self.axis @ geom.right_jacobian_inv(vi) @ self.R_ie)[None, :] * self.w
        Jj = (self.axis @ geom.right_jacobian_inv(vj) @ self.R_ie)[None, :] * self.w
        return r, [Ji, Jj]


class EncoderRotBatch(BatchFactor):
    """Batched absolute rotation residuals r = log(R_ic R_ie^T) - theta a."""

    dim = 3
    n_slots = 1

    def __init__(self, frames, extr, noise, sigma_perp, name="encrot"):
        self.frames = frames
        self.axis = extr.axis_v
        self.R_ie = extr.R_ie
        self.thetas = np.array([f.theta for f in frames])
        a_outer = np.outer(self.axis, self.axis)
        self.W = a_outer / noise.enc_angle + (np.eye(3) - a_outer) / sigma_perp
        self.name = name
        self.n = len(frames)
        self.huber = None

    def eval_batch(self, with_jac=False):
        Ric = np.stack([f.erot.value for f in self.frames])
        v = geom.so3_log_batch(Ric @ self.R_ie.T)
        k = np.round((v @ self.axis - self.thetas) / (2.0 * np.pi))
        r = (v - (self.thetas + 2.0 * np.pi * k)[:, None] * self.axis[None, :]) @ self.W.T
        valid = np.ones(self.n, dtype=bool)
        if not with_jac:
            return r, None, valid
        J = self.W @ geom.right_jacobian_inv_batch(v) @ self.R_ie
        return r, [J], valid

    def slot_blocks(self):
        return [[f.erot for f in self.frames]]


class EncoderPosBatch(BatchFactor):
    """Batched absolute lever-arm residuals r = exp(theta a^) p_ec + p_ie - p_ic."""

    dim = 3
    n_slots = 1

    def __init__(self, frames, extr, sigma_pos, name="encpos"):
        self.frames = frames
        thetas = np.array([f.theta for f in frames])
        E = geom.so3_exp_batch(thetas[:, None] * extr.axis_v[None, :])
        self.pred = np.asarray(extr.p_ie)[None, :] + E @ np.asarray(extr.p_ec)
        self.w = 1.0 / sigma_pos
        self.name = name
        self.n = len(frames)
        self.huber = None

    def eval_batch(self, with_jac=False):
        pic = np.stack([f.epos.value for f in self.frames])
        r = self.w * (self.pred - pic)
        valid = np.ones(self.n, dtype=bool)
        if not with_jac:
            return r, None, valid
        J = np.broadcast_to(-self.w * np.eye(3), (self.n, 3, 3))
        return r, [J], valid

    def slot_blocks(self):
        return [[f.epos for f in self.frames]]


class EncoderRelBatch(BatchFactor):
    """Batched scalar residuals wrap(phi_j - phi_i - (theta_j - theta_i))."""

    dim = 1
    n_slots = 2

    def __init__(self, frames, extr, noise, name="encrel"):
        self.frames = frames
        self.axis = extr.axis_v
        self.R_ie = extr.R_ie
        th = np.array([f.theta for f in frames])
        self.dthetas = geom.wrap_angle(th[1:] - th[:-1])
        self.w = 1.0 / (np.sqrt(2.0) * noise.enc_angle)
        self.name = name
        self.n = len(frames) - 1
        self.huber = None

    def eval_batch(self, with_jac=False):
        Ric = np.stack([f.erot.value for f in self.frames])
        v = geom.so3_log_batch(Ric @ self.R_ie.T)
        phi = v @ self.axis
        r = (self.w * geom.wrap_angle(phi[1:] - phi[:-1] - self.dthetas))[:, None]
        valid = np.ones(self.n, dtype=bool)
        if not with_jac:
            return r, None, valid
        aJ = np.einsum("a,nab,bc->nc", self.axis,
                       geom.right_jacobian_inv_batch(v), self.R_ie)
        Ji = -self.w * aJ[:-1][:, None, :]
        Jj = self.w * aJ[1:][:, None, :]
        return r, [Ji, Jj], valid

    def slot_blocks(self):
        return [[f.erot for f in self.frames[:-1]],
                [f.erot for f in self.frames[1:]]]


class ExtrinsicChainBatch(BatchFactor):
    """Batched extrinsic process-model residuals between consecutive frames."""

    dim = 6
    n_slots = 4

    def __init__(self, frames, extr, noise, name="chain"):
        self.frames = frames
        self.axis = extr.axis_v
        self.p_ie = np.asarray(extr.p_ie, dtype=float)
        th = np.array([f.theta for f in frames])
        ts = np.array([f.t for f in frames])
        dth = geom.wrap_angle(th[1:] - th[:-1])
        self.E = geom.so3_exp_batch(dth[:, None] * self.axis[None, :])
        dt = ts[1:] - ts[:-1]
        sig2 = noise.enc_rate ** 2 * dt + 2.0 * noise.enc_angle ** 2
        lever = self.E @ np.asarray(extr.p_ec, dtype=float)
        m = np.concatenate([np.broadcast_to(self.axis, lever.shape),
                            np.cross(np.broadcast_to(self.axis, lever.shape), lever)],
                           axis=1)
        self.n = len(frames) - 1
        self.W = np.empty((self.n, 6, 6))
        floor = np.diag([1e-10] * 3 + [1e-12] * 3)
        for i in range(self.n):
            Q = np.outer(m[i], m[i]) * sig2[i] + floor
            W, _ = preint.sqrt_info(Q)
            self.W[i] = W
        self.name = name
        self.huber = None

    def eval_batch(self, with_jac=False):
        Ric = np.stack([f.erot.value for f in self.frames])
        pic = np.stack([f.epos.value for f in self.frames])
        pred_R = self.E @ Ric[:-1]
        pred_p = self.p_ie[None, :] + np.einsum(
            "nij,nj->ni", self.E, pic[:-1] - self.p_ie[None, :])
        psi = geom.so3_log_batch(np.transpose(pred_R, (0, 2, 1)) @ Ric[1:])
        r = np.concatenate([psi, pic[1:] - pred_p], axis=1)
        r = np.einsum("nij,nj->ni", self.W, r)
        valid = np.ones(self.n, dtype=bool)
        if not with_jac:
            return r, None, valid
        Jri = np.zeros((self.n, 6, 3))
        Jri[:, :3, :] = -geom.right_jacobian_inv_batch(-psi)   # left jacobian inverse
        Jpi = np.zeros((self.n, 6, 3))
        Jpi[:, 3:, :] = -self.E
        Jrj = np.zeros((self.n, 6, 3))
        Jrj[:, :3, :] = geom.right_jacobian_inv_batch(psi)
        Jpj = np.zeros((self.n, 6, 3))
        Jpj[:, 3:, :] = np.eye(3)[None]
        W = self.W
        return r, [W @ Jri, W @ Jpi, W @ Jrj, W @ Jpj], valid

    def slot_blocks(self):
        F = self.frames
        return [[f.erot for f in F[:-1]], [f.epos for f in F[:-1]],
                [f.erot for f in F[1:]], [f.epos for f in F[1:]]]


class VisualFactorBatch(BatchFactor):
    """Batched inverse-depth reprojection rows over window (or loop) frames.

    ``frames`` is the bundle list; rows reference it by index for the anchor
    (ai) and observer (ji) and a landmark-block index (li).
    """

    dim = 2
    n_slots = 9

    def __init__(self, frames, lam_blocks, ai, ji, li, anchor_uv, obs_uv,
                 weight, huber=None, min_depth=0.05, name="visual"):
        self.frames = frames
        self.lam_blocks = lam_blocks
        self.ai = np.asarray(ai, dtype=np.int64)
        self.ji = np.asarray(ji, dtype=np.int64)
        self.li = np.asarray(li, dtype=np.int64)
        self.anchor_uv = np.asarray(anchor_uv, dtype=float).reshape(-1, 2)
        self.obs_uv = np.asarray(obs_uv, dtype=float).reshape(-1, 2)
        self.n = len(self.ai)
        self.weight = weight
        self.huber = huber
        self.min_depth = min_depth
        self.name = name
        self._slots_cache = None

    def eval_batch(self, with_jac=False):
        F = self.frames
        Rgi = np.stack([f.rot.value for f in F])
        pgi = np.stack([f.pos.value for f in F])
        Ric = np.stack([f.erot.value for f in F])
        pic = np.stack([f.epos.value for f in F])
        lam = np.array([b.value[0] for b in self.lam_blocks])
        res, jac, valid = visual_eval(
            Rgi[self.ai], pgi[self.ai], Ric[self.ai], pic[self.ai],
            Rgi[self.ji], pgi[self.ji], Ric[self.ji], pic[self.ji],
            lam[self.li], self.anchor_uv, self.obs_uv,
            self.weight, self.min_depth, with_jac)
        if not with_jac:
            return res, None, valid
        jacs = [jac[:, :, 0:3], jac[:, :, 3:6], jac[:, :, 6:9], jac[:, :, 9:12],
                jac[:, :, 12:15], jac[:, :, 15:18], jac[:, :, 18:21],
                jac[:, :, 21:24], jac[:, :, 24:25]]
        return res, jacs, valid

    def slot_blocks(self):
        if self._slots_cache is None:
            F = self.frames
            self._slots_cache = [
                [F[i].rot for i in self.ai], [F[i].pos for i in self.ai],
                [F[i].erot for i in self.ai], [F[i].epos for i in self.ai],
                [F[i].rot for i in self.ji], [F[i].pos for i in self.ji],
                [F[i].erot for i in self.ji], [F[i].epos for i in self.ji],
                [b for b in (self.lam_blocks[k] for k in self.li)],
            ]
        return self._slots_cache

    def offset_table(self, offmap):
        F = self.frames
        per_frame = np.empty((len(F), 4), dtype=np.int64)
        for k, f in enumerate(F):
            per_frame[k] = [offmap.get(id(f.rot), -1), offmap.get(id(f.pos), -1),
                            offmap.get(id(f.erot), -1), offmap.get(id(f.epos), -1)]
        lam_off = np.array([offmap.get(id(b), -1) for b in self.lam_blocks],
                           dtype=np.int64)
        return [per_frame[self.ai, 0], per_frame[self.ai, 1],
                per_frame[self.ai, 2], per_frame[self.ai, 3],
                per_frame[self.ji, 0], per_frame[self.ji, 1],
                per_frame[self.ji, 2], per_frame[self.ji, 3],
                lam_off[self.li]]


# ---------------------------------------------------------------- pipeline

@dataclass
class LoopEvent:
    t: float
    t_hist: float
    kind: str        # "self" or "cross"
    shared: int


@dataclass
class FrameStat:
    t: float
    n_keyframes: int
    n_factors: int
    iterations: int
    cost0: float
    cost1: float
    reason: str


class Estimator:
    """Dataset-driven sliding-window odometry runner."""

    def __init__(self, ds, calibration, config=None, noise=None):
        self.ds = ds
        self.extr = calibration
        self.cfg = config or EstimatorConfig()
        self.noise = noise or NoiseConfig.from_meta(ds.meta)
        self.imu_noise = preint.ImuNoise(
            gyro=self.noise.gyro, gyro_walk=self.noise.gyro_walk,
            accel=self.noise.accel, accel_walk=self.noise.accel_walk)
        self.pixel_sigma = max(float(ds.meta.get("pixel_sigma", 0.0)), 1e-5)
        self.gravity = None
        self.bg0 = None
        self.ba0 = None
        self.keyframes = []
        self.latest = None
        self.tracks = {}
        self.history = []
        self.prior = None
        self.init_prior = None
        self.init_prior_frame = None
        self.last_seen = {}
        self.loop_events = []
        self.frame_stats = []
        self.trajectory = []
        self._frames_aug = None   # frames + history bundles for loop factors
        enc_wrapped = geom.wrap_angle(ds.enc_theta)
        self._triggers = [(float(t), float(th), fr.ids, fr.uv)
                          for t, th, fr in zip(ds.enc_t, enc_wrapped, ds.frames)]

    # ------------------------------------------------------------ bootstrap
    def bootstrap(self):
        """Gravity direction, gyro bias and accel-bias split from the initial
        stationary segment; fails on a moving start."""
        cfg = self.cfg
        t0 = self.ds.imu_t[0]
        mask = self.ds.imu_t <= t0 + cfg.bootstrap_window
        if mask.sum() < 20:
            raise InitializationError("not enough IMU samples to bootstrap")
        gyro = self.ds.imu_gyro[mask]
        accel = self.ds.imu_accel[mask]
        if (gyro.std(axis=0).max() > 0.2 or accel.std(axis=0).max() > 0.5
                or np.abs(gyro.mean(axis=0)).max() > 0.05):
            raise InitializationError("no stationary segment at dataset start")
        f_mean = accel.mean(axis=0)
        norm = np.linalg.norm(f_mean)
        if not 0.8 * GRAVITY_NOMINAL < norm < 1.2 * GRAVITY_NOMINAL:
            raise InitializationError("stationary accel magnitude %.2f is not ~g" % norm)
        self.gravity = -GRAVITY_NOMINAL * f_mean / norm
        self.bg0 = gyro.mean(axis=0)
        self.ba0 = f_mean + self.gravity
        return self.gravity, self.bg0, self.ba0

    # ------------------------------------------------------------ imu slices
    def _imu_between(self, t0, t1):
        """Samples covering [t0, t1] with linearly interpolated endpoints."""
        t = self.ds.imu_t
        i0 = int(np.searchsorted(t, t0, side="right"))
        i1 = int(np.searchsorted(t, t1, side="left"))
        stamps = [t0]
        gyros = [self._interp_imu(t0)]
        accels = [self._interp_imu(t0, accel=True)]
        for k in range(i0, i1):
            if t0 < t[k] < t1:
                stamps.append(t[k])
                gyros.append(self.ds.imu_gyro[k])
                accels.append(self.ds.imu_accel[k])
        stamps.append(t1)
        gyros.append(self._interp_imu(t1))
        accels.append(self._interp_imu(t1, accel=True))
        return np.array(stamps), np.array(gyros), np.array(accels)

    def _interp_imu(self, tq, accel=False):
        t = self.ds.imu_t
        arr = self.ds.imu_accel if accel else self.ds.imu_gyro
        k = int(np.clip(np.searchsorted(t, tq, side="right") - 1, 0, len(t) - 2))
        f = (tq - t[k]) / (t[k + 1] - t[k])
        f = np.clip(f, 0.0, 1.0)
        return arr[k] * (1 - f) + arr[k + 1] * f

    # ------------------------------------------------------------------ run
    def run(self):
        """Process the whole dataset; returns the trajectory array (t, p, cgr)."""
        self.bootstrap()
        for t, theta, ids, uv in self._triggers:
            self.process_frame(t, theta, ids, uv)
        return np.array([np.concatenate([[t], p, s]) for t, p, s in self.trajectory])

    # -------------------------------------------------------------- frames
    def _make_frame(self, t, theta, prev=None):
        if prev is None:
            R_gi = np.eye(3)
            p_gi = np.zeros(3)
            v_gi = np.zeros(3)
            bg, ba = self.bg0.copy(), self.ba0.copy()
            pre = None
        else:
            stamps, gy, ac = self._imu_between(prev.t, t)
            pre = preint.integrate(stamps, gy, ac, prev.bg.value, prev.ba.value,
                                   self.imu_noise)
            dt = pre.dt_total
            R_gi = prev.rot.value @ pre.dR
            v_gi = prev.vel.value + self.gravity * dt + prev.rot.value @ pre.dv
            p_gi = (prev.pos.value + prev.vel.value * dt
                    + 0.5 * self.gravity * dt * dt + prev.rot.value @ pre.dp)
            bg, ba = prev.bg.value.copy(), prev.ba.value.copy()
            prev._pre_to_next = pre
            prev._pre_to_t = t
        if self.cfg.use_encoder or prev is None:
            R_ic = self.extr.camera_rotation(theta)
            p_ic = self.extr.camera_position(theta)
        else:
            dth = geom.wrap_angle(theta - prev.theta)
            E = geom.so3_exp(dth * self.extr.axis_v)
            R_ic = E @ prev.erot.value
            p_ic = np.asarray(self.extr.p_ie) + E @ (prev.epos.value - np.asarray(self.extr.p_ie))
        f = FrameState(t, theta, R_gi, p_gi, v_gi, bg, ba, R_ic, p_ic)
        return f, pre

    def _parallax_and_tracked(self, kf, frame):
        """Rotation-compensated mean parallax and shared-track count vs a keyframe."""
        ids_kf = {int(i): k for k, i in enumerate(kf.obs_ids)}
        shared = [(ids_kf[int(i)], k) for k, i in enumerate(frame.obs_ids)
                  if int(i) in ids_kf]
        if not shared:
            return np.inf, 0
        R_kf, _ = kf.camera_pose()
        R_fr, _ = frame.camera_pose()
        R_rel = R_fr.T @ R_kf    # kf-camera to frame-camera
        uv_kf = kf.obs_uv[[a for a, _ in shared]]
        uv_fr = frame.obs_uv[[b for _, b in shared]]
        h = np.concatenate([uv_kf, np.ones((len(uv_kf), 1))], axis=1)
        hp = h @ R_rel.T
        good = hp[:, 2] > 1e-6
        if not np.any(good):
            return np.inf, len(shared)
        pred = hp[good, :2] / hp[good, 2:3]
        par = np.linalg.norm(uv_fr[good] - pred, axis=1).mean()
        return float(par), len(shared)

    def process_frame(self, t, theta, ids, uv):
        cfg = self.cfg
        if self.latest is None:
            frame, _ = self._make_frame(t, theta)
            frame.obs_ids = np.asarray(ids, dtype=np.int64)
            frame.obs_uv = np.asarray(uv, dtype=float).reshape(-1, 2)
            frame.is_keyframe = True
            self.keyframes.append(frame)
            self.latest = frame
            self._register_obs(frame)
            self._touch_ids(frame)
            # stationary-start prior: pins velocity and biases so the window
            # problem is well-posed before vision comes up
            from .solver import LinearPriorFactor
            cfgp = self.cfg
            jacs = [np.eye(3) / cfgp.prior_sigma_v,
                    np.eye(3) / cfgp.prior_sigma_bg,
                    np.eye(3) / cfgp.prior_sigma_ba]
            Z = np.zeros((3, 3))
            self.init_prior = LinearPriorFactor(
                [frame.vel, frame.bg, frame.ba],
                [np.vstack([jacs[0], Z, Z]), np.vstack([Z, jacs[1], Z]),
                 np.vstack([Z, Z, jacs[2]])],
                np.zeros(9),
                [frame.vel.value.copy(), frame.bg.value.copy(), frame.ba.value.copy()],
                name="init_prior")
            self.init_prior_frame = frame
            self._record(frame, FrameStat(t, 1, 0, 0, 0.0, 0.0, "first"))
            return frame

        # promote or drop the previous latest now that a new frame arrived
        prev = self.latest
        if prev is not self.keyframes[-1]:
            if prev.is_keyframe:
                self.keyframes.append(prev)
                if len(self.keyframes) > cfg.window:
                    self._marginalize_oldest()
            else:
                self._drop_frame(prev)

        frame, _ = self._make_frame(t, theta, prev=self.keyframes[-1])
        frame.obs_ids = np.asarray(ids, dtype=np.int64)
        frame.obs_uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        par, tracked = self._parallax_and_tracked(self.keyframes[-1], frame)
        frame.is_keyframe = par > cfg.parallax_thresh or tracked < cfg.min_tracked
        self.latest = frame
        self._register_obs(frame)
        loops = self._detect_loops(frame) if cfg.use_loops else []
        self._touch_ids(frame)
        self._triangulate_pending()

        problem, n_factors, lam_blocks = self._build_problem(loops)
        report = problem.solve(SolveOptions(max_iterations=cfg.max_iterations,
                                            cost_tol=1e-6, grad_tol=1e-8,
                                            cost_abs_tol=1e-10),
                               eliminate=lam_blocks)
        for b in lam_blocks:
            if b.value[0] < 1e-3:
                b.value = np.array([1e-3])
        self._record(frame, FrameStat(t, len(self.keyframes), n_factors,
                                      report.iterations, report.initial_cost,
                                      report.final_cost, report.reason))
        return frame

    def _record(self, frame, stat):
        self.trajectory.append((frame.t, frame.pos.value.copy(),
                                geom.cgr_from_matrix(frame.rot.value)))
        self.frame_stats.append(stat)

    # ---------------------------------------------------------- landmarks
    def _register_obs(self, frame):
        for k, lid in enumerate(frame.obs_ids):
            lid = int(lid)
            tr = self.tracks.get(lid)
            if tr is None:
                if not frame.is_keyframe:
                    continue
                tr = LandmarkTrack(lid, frame, frame.obs_uv[k])
                self.tracks[lid] = tr
            tr.obs[id(frame)] = (frame, frame.obs_uv[k])

    def _touch_ids(self, frame):
        for lid in frame.obs_ids:
            self.last_seen[int(lid)] = frame.t

    def _drop_frame(self, frame):
        for tr in self.tracks.values():
            tr.obs.pop(id(frame), None)

    def _triangulate_pending(self):
        cfg = self.cfg
        for tr in self.tracks.values():
            if tr.ready or len(tr.obs) < 2:
                continue
            anchor = tr.anchor
            Ra, ca = anchor.camera_pose()
            da = Ra @ np.array([tr.anchor_uv[0], tr.anchor_uv[1], 1.0])
            da /= np.linalg.norm(da)
            best = None
            for fid, (fr, uv) in tr.obs.items():
                if fr is anchor:
                    continue
                Rb, cb = fr.camera_pose()
                db = Rb @ np.array([uv[0], uv[1], 1.0])
                db /= np.linalg.norm(db)
                ang = np.arccos(np.clip(np.dot(da, db), -1, 1))
                if best is None or ang > best[0]:
                    best = (ang, cb, db)
            if best is None or best[0] < cfg.triang_parallax:
                continue
            depth = _triangulate_depth(ca, da, best[1], best[2])
            if depth is None or depth < 2.0 * cfg.min_cam_depth:
                continue
            # depth along the unnormalized anchor bearing [u, v, 1]
            scale = np.linalg.norm([tr.anchor_uv[0], tr.anchor_uv[1], 1.0])
            lam = scale / depth
            tr.lam.value = np.array([min(max(lam, 1e-3), 1.0 / cfg.min_cam_depth)])
            tr.ready = True

    # -------------------------------------------------------------- loops
    def _detect_loops(self, frame):
        cfg = self.cfg
        now = frame.t
        reobs = [int(i) for i in frame.obs_ids
                 if now - self.last_seen.get(int(i), now) > cfg.loop_gap]
        if len(reobs) < cfg.loop_min_reobs or not self.history:
            return []
        cur_ids = set(int(i) for i in frame.obs_ids)
        best = None
        for h in self.history:
            if now - h.t < cfg.loop_gap:
                continue
            shared = len(cur_ids & h.ids)
            if shared >= cfg.loop_min_shared and (best is None or shared > best[1]):
                best = (h, shared)
        if best is None:
            return []
        h, shared = best
        dist = np.linalg.norm(h.pos.value - frame.pos.value)
        kind = "self" if dist < cfg.loop_base_radius else "cross"
        self.loop_events.append(LoopEvent(now, h.t, kind, shared))
        # reprojection rows: window landmarks seen by the history frame
        rows = []
        for lid in cur_ids & h.ids:
            tr = self.tracks.get(lid)
            if tr is None or not tr.ready:
                continue
            rows.append((tr, h.uv_by_id[lid]))
            if len(rows) >= cfg.loop_max_factors:
                break
        return [(h, rows)] if rows else []

    # ------------------------------------------------------ marginalization
    def _marginalize_oldest(self):
        cfg = self.cfg
        old = self.keyframes.pop(0)
        kf_next = self.keyframes[0]

        # re-anchor surviving tracks away from the retiring frame
        for tr in list(self.tracks.values()):
            tr.obs.pop(id(old), None)
            if tr.anchor is old:
                new_anchor = None
                for fid, (fr, uv) in sorted(tr.obs.items(), key=lambda kv: kv[1][0].t):
                    if fr.is_keyframe:
                        new_anchor = (fr, uv)
                        break
                if new_anchor is None:
                    del self.tracks[tr.lid]
                    continue
                fr, uv = new_anchor
                if tr.ready:
                    # keep the world point fixed: recompute depth in the new anchor
                    Ra, ca = tr.anchor.camera_pose()
                    h = np.array([tr.anchor_uv[0], tr.anchor_uv[1], 1.0])
                    pw = ca + Ra @ h / tr.lam.value[0]
                    Rb, cb = fr.camera_pose()
                    q = Rb.T @ (pw - cb)
                    if q[2] > 2.0 * cfg.min_cam_depth:
                        tr.lam.value = np.array([
                            min(max(1.0 / q[2], 1e-3), 1.0 / cfg.min_cam_depth)])
                    else:
                        tr.ready = False
                tr.anchor = fr
                tr.anchor_uv = np.asarray(uv, dtype=float)

        # marginalize the frame's chain factors into the prior
        mp = Problem()
        pre = getattr(old, "_pre_to_next", None)
        if pre is not None:
            mp.add(PreintFactor(old, kf_next, pre, self.gravity, name="m_preint"))
        mp.add(ExtrinsicChainFactor(old, kf_next, self.extr, self.noise, name="m_chain"))
        if cfg.use_encoder:
            mp.add(EncoderRotFactor(old, self.extr, self.noise, cfg.enc_sigma_perp))
            mp.add(EncoderPosFactor(old, self.extr, cfg.enc_sigma_pos))
            mp.add(EncoderRelFactor(old, kf_next, self.extr, self.noise))
        if self.prior is not None:
            mp.add(self.prior)
        if self.init_prior is not None and old is self.init_prior_frame:
            mp.add(self.init_prior)
            self.init_prior = None
            self.init_prior_frame = None
        removed = [old.rot, old.pos, old.vel, old.bg, old.ba, old.erot, old.epos]
        # the gauge blocks are baked in as constants
        old.rot.frozen = True
        old.pos.frozen = True
        self.prior = mp.marginalize(removed)
        self.history.append(HistoryFrame(old))

    # --------------------------------------------------------- problem build
    def _build_problem(self, loops):
        cfg = self.cfg
        frames = list(self.keyframes)
        if self.latest is not frames[-1]:
            frames.append(self.latest)

        # gauge: freeze the oldest keyframe pose (and extrinsic without encoder)
        for k, f in enumerate(frames):
            first = k == 0
            f.rot.frozen = first
            f.pos.frozen = first
            ext_frozen = not cfg.optimize_extrinsics or (first and not cfg.use_encoder)
            f.erot.frozen = ext_frozen
            f.epos.frozen = ext_frozen

        p = Problem()
        n_factors = 0
        if self.prior is not None:
            p.add(self.prior)
            n_factors += 1
        if self.init_prior is not None:
            p.add(self.init_prior)
            n_factors += 1

        for fi, fj in zip(frames[:-1], frames[1:]):
            pre = self._pair_preint(fi, fj)
            p.add(PreintFactor(fi, fj, pre, self.gravity,
                               name="preint@%.3f" % fj.t))
            n_factors += 1
        p.add(ExtrinsicChainBatch(frames, self.extr, self.noise))
        n_factors += len(frames) - 1
        if cfg.use_encoder:
            p.add(EncoderRotBatch(frames, self.extr, self.noise, cfg.enc_sigma_perp))
            p.add(EncoderPosBatch(frames, self.extr, cfg.enc_sigma_pos))
            p.add(EncoderRelBatch(frames, self.extr, self.noise))
            n_factors += 3 * len(frames) - 1

        # window visual rows
        findex = {id(f): k for k, f in enumerate(frames)}
        lam_blocks = []
        lam_index = {}
        ai, ji, li, auv, ouv = [], [], [], [], []
        for tr in self.tracks.values():
            if not tr.ready or id(tr.anchor) not in findex:
                continue
            a = findex[id(tr.anchor)]
            rows = []
            for fid, (fr, uv) in tr.obs.items():
                j = findex.get(id(fr))
                if j is None or fr is tr.anchor:
                    continue
                rows.append((j, uv))
            if not rows:
                continue
            if id(tr.lam) not in lam_index:
                lam_index[id(tr.lam)] = len(lam_blocks)
                lam_blocks.append(tr.lam)
            lidx = lam_index[id(tr.lam)]
            for j, uv in rows:
                ai.append(a)
                ji.append(j)
                li.append(lidx)
                auv.append(tr.anchor_uv)
                ouv.append(uv)
        if ai:
            p.add(VisualFactorBatch(frames, lam_blocks, ai, ji, li, auv, ouv,
                                    weight=1.0 / self.pixel_sigma,
                                    huber=cfg.huber, min_depth=cfg.min_cam_depth))
            n_factors += len(ai)

        # loop rows against frozen history frames
        for h, rows in loops:
            frames_aug = frames + [h]
            hj = len(frames_aug) - 1
            lai, lji, lli, lauv, louv = [], [], [], [], []
            llam = []
            lidx = {}
            for tr, uv_hist in rows:
                a = findex.get(id(tr.anchor))
                if a is None:
                    continue
                if id(tr.lam) not in lidx:
                    lidx[id(tr.lam)] = len(llam)
                    llam.append(tr.lam)
                lai.append(a)
                lji.append(hj)
                lli.append(lidx[id(tr.lam)])
                lauv.append(tr.anchor_uv)
                louv.append(uv_hist)
            if lai:
                p.add(VisualFactorBatch(frames_aug, llam, lai, lji, lli, lauv, louv,
                                        weight=1.0 / self.pixel_sigma,
                                        huber=cfg.huber, min_depth=cfg.min_cam_depth,
                                        name="loop"))
                n_factors += len(lai)

        return p, n_factors, lam_blocks

    def _pair_preint(self, fi, fj):
        cached = getattr(fi, "_pre_to_next", None)
        if cached is not None and getattr(fi, "_pre_to_t", None) == fj.t \
                and np.linalg.norm(fi.bg.value - cached.bg_lin) < 0.02 \
                and np.linalg.norm(fi.ba.value - cached.ba_lin) < 0.1:
            return cached   # first-order bias correction covers the drift
        stamps, gy, ac = self._imu_between(fi.t, fj.t)
        pre = preint.integrate(stamps, gy, ac, fi.bg.value, fi.ba.value,
                               self.imu_noise)
        fi._pre_to_next = pre
        fi._pre_to_t = fj.t
        return pre


def _triangulate_depth(c1, d1, c2, d2):
    """Depth along ray 1 of the midpoint-closest pair of two world rays."""
    w = c2 - c1
    a = 1.0
    b = float(np.dot(d1, d2))
    denom = a - b * b
    if abs(denom) < 1e-12:
        return None
    s = (np.dot(d1, w) - b * np.dot(d2, w)) / denom
    u = (b * np.dot(d1, w) - np.dot(d2, w)) / denom
    if s <= 0 or u <= 0:
        return None
    return float(s)


def run_dataset(ds, calibration_path, config=None):
    """Convenience wrapper: load calibration, run, return (estimator, trajectory)."""
    extr, _ = import_calibration(calibration_path)
    est = Estimator(ds, extr, config=config)
    traj = est.run()
    return est, traj
