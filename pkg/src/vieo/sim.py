"""Deterministic rig simulator with ground truth.

Models a spinning-camera sensor head: the IMU sits on the motor stator (so the
spin never enters the IMU signals), the camera rotates about a fixed axis
measured by an absolute encoder, and camera + encoder share hardware-
synchronized 30 Hz triggers.

Kinematic chain (world frame G, IMU/base frame I, camera frame C):

* base pose: identity attitude, analytic translation (``R_gi = I``)
* camera-to-IMU rotation at spin angle theta: ``R_ic = exp(theta a^) R_ie``
* camera origin in I:                 ``p_ic = p_ie + exp(theta a^) p_ec``

Gravity is fixed at (0, 0, -9.81) in G.  All synthesis is a pure function of
(world, rig, motion, spin, duration, seed).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .dataset import CameraFrame, Dataset, round9
from .dataset import read_dataset, write_dataset  # noqa: F401  (dataset I/O lives with sim)

GRAVITY = np.array([0.0, 0.0, -9.81])


# --------------------------------------------------------------------- rig

@dataclass(frozen=True)
class ViDarExtrinsics:
    """Spin axis and lever arms of the rotating camera head (IMU frame)."""
    axis: tuple = (0.0, 0.0, 1.0)
    s_ie: tuple = (0.0, 0.0, 0.0)    # CGR of camera-to-IMU rotation at angle 0
    p_ie: tuple = (0.0, 0.0, 0.0)    # encoder origin in I, m
    p_ec: tuple = (0.0, 0.0, 0.0)    # camera origin in zero-angle rotor frame, m

    @property
    def axis_v(self):
        return np.asarray(self.axis, dtype=float)

    @property
    def R_ie(self):
        return geom.cgr_to_matrix(np.asarray(self.s_ie, dtype=float))

    def camera_rotation(self, theta):
        """Camera-to-IMU rotation at spin angle theta."""
        return geom.so3_exp(theta * self.axis_v) @ self.R_ie

    def camera_position(self, theta):
        return np.asarray(self.p_ie) + geom.so3_exp(theta * self.axis_v) @ np.asarray(self.p_ec)


def default_extrinsics():
    """Slightly tilted axis and a ~13 cm lever arm; camera optical axis along +x.

    The camera lever arm p_ec is defined perpendicular to the spin axis (its
    axis-parallel component is a calibration gauge and lives in p_ie).
    """
    axis = np.array([0.03, -0.02, 1.0])
    axis /= np.linalg.norm(axis)
    # camera x right (-y_I), y down (-z_I), z forward (+x_I)
    R_ie = np.array([[0.0, 0.0, 1.0],
                     [-1.0, 0.0, 0.0],
                     [0.0, -1.0, 0.0]])
    p_ec = np.array([0.13, 0.02, 0.03])
    p_ec -= np.dot(p_ec, axis) * axis
    return ViDarExtrinsics(
        axis=tuple(axis),
        s_ie=tuple(geom.cgr_from_matrix(R_ie)),
        p_ie=(0.03, 0.01, 0.12),
        p_ec=tuple(p_ec),
    )


@dataclass(frozen=True)
class SensorRig:
    focal: float = 460.0                  # px-equivalent, scales pixel noise only
    fov_half: float = np.pi / 4
    imu_rate: float = 200.0
    trigger_rate: float = 30.0
    gyro_noise: float = 1e-3              # rad/s/sqrt(Hz)
    gyro_walk: float = 1e-5
    accel_noise: float = 1e-2             # m/s^2/sqrt(Hz)
    accel_walk: float = 1e-4
    enc_quant: float = 2.0 * np.pi / 4096.0
    pixel_sigma: float = 1.0 / 460.0      # normalized-coordinate noise
    depth_min: float = 0.5
    depth_max: float = 40.0
    max_features: int = 0                 # per-frame cap; 0 = unlimited
    extrinsics: ViDarExtrinsics = field(default_factory=default_extrinsics)

    @classmethod
    def ideal(cls, **kw):
        """Noiseless, unquantized configuration (master integration tests)."""
        base = dict(gyro_noise=0.0, gyro_walk=0.0, accel_noise=0.0,
                    accel_walk=0.0, enc_quant=0.0, pixel_sigma=0.0)
        base.update(kw)
        return cls(**base)


# ------------------------------------------------------------------- world

@dataclass(frozen=True)
class WorldModel:
    """Static landmark field; ids are the stable array indices."""
    points: np.ndarray
    kind: str = "shell"
    seed: int = 0
    params: tuple = ()

    @classmethod
    def shell(cls, count=2000, r_min=3.0, r_max=30.0, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        u = rng.normal(size=(count, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = (r_min ** 3 + rng.random(count) * (r_max ** 3 - r_min ** 3)) ** (1.0 / 3.0)
        return cls(points=u * r[:, None], kind="shell", seed=seed,
                   params=(count, r_min, r_max))

    @classmethod
    def corridor(cls, count=1200, length=20.0, width=2.0, height=2.5, seed=0):
        """Landmarks on the two side walls of a corridor along +x."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        n_side = count // 2
        pts = []
        for sign in (1.0, -1.0):
            n = n_side if sign > 0 else count - n_side
            x = rng.uniform(-3.0, length + 3.0, size=n)
            y = sign * width + sign * rng.uniform(0.0, 0.6, size=n)
            z = rng.uniform(-0.5, height, size=n)
            pts.append(np.column_stack([x, y, z]))
        return cls(points=np.vstack(pts), kind="corridor", seed=seed,
                   params=(count, length, width, height))

    @classmethod
    def from_meta(cls, kind, seed, params):
        if kind == "shell":
            count, r_min, r_max = params
            return cls.shell(int(count), r_min, r_max, int(seed))
        if kind == "corridor":
            count, length, width, height = params
            return cls.corridor(int(count), length, width, height, int(seed))
        raise ValueError("unknown world kind %r" % kind)


# ----------------------------------------------------------------- motions

@dataclass(frozen=True)
class BaseMotion:
    """Analytic base translation (attitude stays identity).

    kinds: ``stationary``; ``line`` sweeps 0..length..0 along +x with a
    smooth (1 - cos) profile of the given period, starting at t_start.
    """
    kind: str = "stationary"
    length: float = 0.0
    period: float = 10.0
    t_start: float = 2.0

    def pos(self, t):
        return np.array([self._s(t), 0.0, 0.0])

    def vel(self, t):
        if self.kind == "stationary":
            return np.zeros(3)
        u = t - self.t_start
        if u <= 0:
            return np.zeros(3)
        w = 2.0 * np.pi / self.period
        return np.array([0.5 * self.length * w * np.sin(w * u), 0.0, 0.0])

    def acc(self, t):
        if self.kind == "stationary":
            return np.zeros(3)
        u = t - self.t_start
        if u <= 0:
            return np.zeros(3)
        w = 2.0 * np.pi / self.period
        return np.array([0.5 * self.length * w * w * np.cos(w * u), 0.0, 0.0])

    def _s(self, t):
        if self.kind == "stationary":
            return 0.0
        u = t - self.t_start
        if u <= 0:
            return 0.0
        return 0.5 * self.length * (1.0 - np.cos(2.0 * np.pi * u / self.period))


@dataclass(frozen=True)
class SpinProfile:
    """Spin angle profile theta(t); rotation is held before t_start.

    kinds: ``stationary`` (theta0); ``reciprocating`` (sinusoid, default
    amplitude 45 deg about the mean, i.e. 90 deg peak to peak, period 10 s);
    ``cyclical`` (default 10 rpm); ``commanded`` (piecewise-constant rate
    stream, integrated from theta0).
    """
    kind: str = "stationary"
    theta0: float = 0.0
    amplitude: float = np.pi / 4
    period: float = 10.0
    rpm: float = 10.0
    t_start: float = 2.0
    command_t: tuple = ()
    command_rate: tuple = ()

    def theta(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "stationary":
            return np.broadcast_to(self.theta0, t.shape).copy() if t.ndim else float(self.theta0)
        if self.kind == "reciprocating":
            u = np.maximum(t - self.t_start, 0.0)
            return self.theta0 + self.amplitude * np.sin(2.0 * np.pi * u / self.period)
        if self.kind == "cyclical":
            u = np.maximum(t - self.t_start, 0.0)
            return self.theta0 + 2.0 * np.pi * self.rpm / 60.0 * u
        if self.kind == "commanded":
            return self._commanded_theta(t)
        raise ValueError("unknown spin kind %r" % self.kind)

    def rate(self, t):
        if self.kind == "stationary":
            return 0.0
        if self.kind == "reciprocating":
            u = t - self.t_start
            if u <= 0:
                return 0.0
            w = 2.0 * np.pi / self.period
            return self.amplitude * w * np.cos(w * u)
        if self.kind == "cyclical":
            return 0.0 if t <= self.t_start else 2.0 * np.pi * self.rpm / 60.0
        if self.kind == "commanded":
            ct = np.asarray(self.command_t)
            if len(ct) == 0 or t < ct[0]:
                return 0.0
            i = int(np.searchsorted(ct, t, side="right") - 1)
            return float(self.command_rate[i])
        raise ValueError("unknown spin kind %r" % self.kind)

    def _commanded_theta(self, t):
        ct = np.asarray(self.command_t, dtype=float)
        cr = np.asarray(self.command_rate, dtype=float)
        scalar = np.ndim(t) == 0
        tq = np.atleast_1d(np.asarray(t, dtype=float))
        if len(ct) == 0:
            out = np.full(tq.shape, self.theta0)
            return float(out[0]) if scalar else out
        # cumulative angle at the command knots
        cum = np.concatenate([[0.0], np.cumsum(cr[:-1] * np.diff(ct))]) if len(ct) > 1 else np.array([0.0])
        out = np.empty(tq.shape)
        for j, tj in enumerate(tq):
            if tj <= ct[0]:
                out[j] = self.theta0
                continue
            i = int(np.searchsorted(ct, tj, side="right") - 1)
            out[j] = self.theta0 + cum[i] + cr[i] * (tj - ct[i])
        return float(out[0]) if scalar else out


# --------------------------------------------------------------- synthesis

def project_points(points, R_gc, p_gc, rig):
    """Visible landmark ids and noiseless normalized coordinates for one pose."""
    q = (points - p_gc[None, :]) @ R_gc      # camera-frame coordinates, row-wise
    tan_half = np.tan(rig.fov_half)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = q[:, 0] / q[:, 2]
        v = q[:, 1] / q[:, 2]
    vis = (q[:, 2] >= rig.depth_min) & (q[:, 2] <= rig.depth_max) \
        & (np.abs(u) <= tan_half) & (np.abs(v) <= tan_half)
    ids = np.nonzero(vis)[0]
    uv = np.column_stack([u[ids], v[ids]])
    return ids, uv


def camera_pose(motion, spin, extr, t):
    """World-frame camera rotation and position at time t (truth)."""
    theta = float(spin.theta(t))
    R_gi = np.eye(3)
    p_gi = motion.pos(t)
    R_gc = R_gi @ extr.camera_rotation(theta)
    p_gc = p_gi + R_gi @ extr.camera_position(theta)
    return R_gc, p_gc


def synthesize(world, rig, motion, spin, duration, seed):
    """Synthesize a dataset; deterministic pure function of its arguments.

    The first ~t_start seconds hold both base and spin stationary so the
    estimator can bootstrap (duration must exceed 2 s).
    """
    if duration <= 2.0:
        raise ValueError("duration must exceed 2 s (includes the stationary bootstrap)")
    extr = rig.extrinsics
    ss = np.random.SeedSequence([int(seed), 7])
    rngs = [np.random.default_rng(s) for s in ss.spawn(5)]
    rng_gn, rng_gw, rng_an, rng_aw, rng_px = rngs

    n_imu = int(math.floor(duration * rig.imu_rate)) + 1
    t_imu = round9(np.arange(n_imu) / rig.imu_rate)
    dt_imu = 1.0 / rig.imu_rate
    n_trig = int(math.floor(duration * rig.trigger_rate)) + 1
    t_trig = round9(np.arange(n_trig) / rig.trigger_rate)

    # base kinematics (identity attitude: body rates are zero, specific force
    # is acc - g expressed in the body frame)
    acc = np.array([motion.acc(t) for t in t_imu])
    if not np.all(np.isfinite(acc)):
        raise ValueError("base trajectory produced non-finite derivatives")
    bg = np.cumsum(rng_gw.normal(size=(n_imu, 3)) * (rig.gyro_walk * np.sqrt(dt_imu)), axis=0)
    ba = np.cumsum(rng_aw.normal(size=(n_imu, 3)) * (rig.accel_walk * np.sqrt(dt_imu)), axis=0)
    gyro_meas = bg + rng_gn.normal(size=(n_imu, 3)) * (rig.gyro_noise * np.sqrt(rig.imu_rate))
    accel_meas = (acc - GRAVITY[None, :]) + ba \
        + rng_an.normal(size=(n_imu, 3)) * (rig.accel_noise * np.sqrt(rig.imu_rate))

    theta_true = np.array([float(spin.theta(t)) for t in t_trig])
    if rig.enc_quant > 0:
        enc_theta = np.round(theta_true / rig.enc_quant) * rig.enc_quant
    else:
        enc_theta = theta_true.copy()
    enc_theta = np.mod(enc_theta, 2.0 * np.pi)

    frames = []
    for j, t in enumerate(t_trig):
        R_gc, p_gc = camera_pose(motion, spin, extr, t)
        ids, uv = project_points(world.points, R_gc, p_gc, rig)
        if rig.max_features and len(ids) > rig.max_features:
            ids = ids[:rig.max_features]
            uv = uv[:rig.max_features]
        if rig.pixel_sigma > 0 and len(ids):
            uv = uv + rng_px.normal(size=uv.shape) * rig.pixel_sigma
        frames.append(CameraFrame(float(t), ids, uv))

    idx_bias = np.minimum(np.searchsorted(t_imu, t_trig, side="right") - 1, n_imu - 1)
    truth_p = np.array([motion.pos(t) for t in t_trig])
    truth_v = np.array([motion.vel(t) for t in t_trig])
    truth_s = np.zeros((n_trig, 3))   # identity base attitude

    meta = {
        "seed": str(int(seed)),
        "duration": repr(float(duration)),
        "gravity": _vec_str(GRAVITY),
        "imu_rate": repr(rig.imu_rate), "trigger_rate": repr(rig.trigger_rate),
        "focal": repr(rig.focal), "fov_half": repr(rig.fov_half),
        "gyro_noise": repr(rig.gyro_noise), "gyro_walk": repr(rig.gyro_walk),
        "accel_noise": repr(rig.accel_noise), "accel_walk": repr(rig.accel_walk),
        "enc_quant": repr(rig.enc_quant), "pixel_sigma": repr(rig.pixel_sigma),
        "depth_min": repr(rig.depth_min), "depth_max": repr(rig.depth_max),
        "max_features": str(rig.max_features),
        "axis": _vec_str(extr.axis), "s_ie": _vec_str(extr.s_ie),
        "p_ie": _vec_str(extr.p_ie), "p_ec": _vec_str(extr.p_ec),
        "world_kind": world.kind, "world_seed": str(world.seed),
        "world_params": _vec_str(world.params),
        "base_kind": motion.kind,
        "base_params": _vec_str((motion.length, motion.period, motion.t_start)),
        "spin_kind": spin.kind,
        "spin_params": _vec_str((spin.theta0, spin.amplitude, spin.period,
                                 spin.rpm, spin.t_start)),
    }

    commands = None
    if spin.kind == "commanded":
        commands = np.column_stack([round9(np.asarray(spin.command_t)),
                                    np.asarray(spin.command_rate)])

    ds = Dataset(
        meta=meta,
        imu_t=t_imu, imu_gyro=gyro_meas, imu_accel=accel_meas,
        enc_t=t_trig.copy(), enc_theta=enc_theta,
        frames=frames,
        truth_t=t_trig.copy(), truth_p=truth_p, truth_s=truth_s, truth_v=truth_v,
        truth_bg=bg[idx_bias], truth_ba=ba[idx_bias], truth_theta=theta_true,
        commands=commands,
    )
    ds.validate()
    return ds


def _vec_str(v):
    return " ".join(repr(float(x)) for x in v)


def _vec_parse(s):
    return np.array([float(x) for x in s.split()])


def rig_from_meta(meta):
    extr = ViDarExtrinsics(
        axis=tuple(_vec_parse(meta["axis"])),
        s_ie=tuple(_vec_parse(meta["s_ie"])),
        p_ie=tuple(_vec_parse(meta["p_ie"])),
        p_ec=tuple(_vec_parse(meta["p_ec"])),
    )
    return SensorRig(
        focal=float(meta["focal"]), fov_half=float(meta["fov_half"]),
        imu_rate=float(meta["imu_rate"]), trigger_rate=float(meta["trigger_rate"]),
        gyro_noise=float(meta["gyro_noise"]), gyro_walk=float(meta["gyro_walk"]),
        accel_noise=float(meta["accel_noise"]), accel_walk=float(meta["accel_walk"]),
        enc_quant=float(meta["enc_quant"]), pixel_sigma=float(meta["pixel_sigma"]),
        depth_min=float(meta["depth_min"]), depth_max=float(meta["depth_max"]),
        max_features=int(meta["max_features"]), extrinsics=extr,
    )


def synthesize_from_meta(meta, commands=None):
    """Regenerate a dataset from its own metadata (regeneration oracle)."""
    world = WorldModel.from_meta(meta["world_kind"], meta["world_seed"],
                                 tuple(_vec_parse(meta["world_params"])))
    rig = rig_from_meta(meta)
    bl, bp, bs = _vec_parse(meta["base_params"])
    motion = BaseMotion(kind=meta["base_kind"], length=bl, period=bp, t_start=bs)
    s0, amp, per, rpm, ts = _vec_parse(meta["spin_params"])
    kw = dict(theta0=s0, amplitude=amp, period=per, rpm=rpm, t_start=ts)
    if meta["spin_kind"] == "commanded":
        if commands is None:
            raise ValueError("commanded spin requires the commands channel")
        kw["command_t"] = tuple(commands[:, 0])
        kw["command_rate"] = tuple(commands[:, 1])
    spin = SpinProfile(kind=meta["spin_kind"], **kw)
    return synthesize(world, rig, motion, spin, float(meta["duration"]), int(meta["seed"]))


# ------------------------------------------------------- policy-driven runs

def run_policy_episode(world, rig, motion, policy, duration, seed,
                       action_scale=None, t_start=2.0, reward_params=None,
                       kmeans_seed=0):
    """Closed-loop episode: a spin policy drives the camera via rate commands.

    The policy sees the active-view state vector built from noiseless
    projections (deterministic); the returned dataset carries the commanded
    spin profile with synthesis noise per the rig.  Returns (dataset, log)
    where log rows are (t, action, n_fp, U, r_q, r_u, r_a, r_d, r_t).
    """
    from . import active

    params = reward_params or active.RewardParams()
    if action_scale is None:
        action_scale = 2.0 * np.pi * 10.0 / 60.0   # one unit = 10 rpm
    extr = rig.extrinsics
    dt = 1.0 / rig.trigger_rate
    n_trig = int(math.floor(duration * rig.trigger_rate)) + 1
    t_trig = round9(np.arange(n_trig) / rig.trigger_rate)

    theta = 0.0
    a_prev = 0.0
    a_prev2 = 0.0
    cmd_t, cmd_rate = [], []
    log = []
    bounds = active.grid_bounds_for(rig)

    for j, t in enumerate(t_trig):
        p_gi = motion.pos(t)
        R_gc = extr.camera_rotation(theta)
        p_gc = p_gi + extr.camera_position(theta)
        ids, uv = project_points(world.points, R_gc, p_gc, rig)
        grid = active.grid_counts(uv, bounds)

        if t < t_start:
            a = 0.0
        else:
            if hasattr(policy, "set_preview"):
                def preview(speed, _t=t, _theta=theta, _p=p_gi):
                    th_next = _theta + float(np.clip(speed, -1, 1)) * action_scale * dt
                    R_c = extr.camera_rotation(th_next)
                    p_c = _p + extr.camera_position(th_next)
                    _, uv_c = project_points(world.points, R_c, p_c, rig)
                    return active.grid_counts(uv_c, bounds)
                policy.set_preview(preview)
            state = active.state_vector(grid, a_prev, a_prev - a_prev2, uv,
                                        bounds, seed=kmeans_seed)
            a = active.clamp_action(policy.step(state))
        r_t, comps = active.reward(grid, a, a_prev, params)
        log.append((float(t), float(a), grid.n_fp, comps.r_u,
                    comps.r_q, comps.r_u, comps.r_a, comps.r_d, r_t))
        a_prev2 = a_prev
        a_prev = a
        cmd_t.append(float(t))
        cmd_rate.append(float(a) * action_scale)
        theta += float(a) * action_scale * dt

    spin = SpinProfile(kind="commanded", command_t=tuple(cmd_t),
                       command_rate=tuple(cmd_rate))
    ds = synthesize(world, rig, motion, spin, duration, seed)
    return ds, np.array(log)
