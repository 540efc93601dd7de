"""Active-view scoring: feature-distribution grid, uniformity metric, spin
control policies and their reward.

The image plane is split into a 20x20 grid of cells; the uniformity score of
a frame is the normalized cell entropy

    U = -(sum_i p_i ln p_i) / ln(n_fp),   p_i = n_i / n_fp over non-empty cells

defined as 0 when n_fp <= 1.  The per-step reward combines a saturating
feature-count term, U, and two Gaussian shaping terms on the action and the
action difference:

    r_t = r_q * r_u + r_a * r_d
    r_q = (e^n - e^(beta n)) / (e^n + e^(beta n))   (= tanh((1-beta) n / 2))
    r_a = exp(-(a - mu_a)^2 / (2 sigma_a^2)) / (lambda_a sqrt(2 pi))
    r_d = exp(-(d - mu_d)^2 / (2 sigma_d^2)) / (lambda_d sqrt(2 pi))

Policies implement ``step(state) -> action in [-1, 1]``; the state vector is
the flattened grid counts, the current action, the action difference, and the
top-k K-Means++ centroid summaries.
"""

import subprocess
import warnings
from dataclasses import dataclass

import numpy as np

GRID = 20


@dataclass
class FeatureGrid:
    counts: np.ndarray   # (20, 20) int
    n_fp: int


@dataclass
class RewardParams:
    beta: float = 0.01
    lambda_a: float = 1.0
    mu_a: float = 0.0
    sigma_a: float = 0.5
    lambda_d: float = 1.0
    mu_d: float = 0.0
    sigma_d: float = 0.25
    gamma: float = 0.99


@dataclass
class RewardComponents:
    r_q: float
    r_u: float
    r_a: float
    r_d: float


def grid_bounds_for(rig):
    """Normalized-coordinate image bounds implied by the rig's field of view."""
    t = float(np.tan(rig.fov_half))
    return (-t, t, -t, t)


def grid_counts(uv, bounds):
    """Bin observations into the 20x20 grid.

    Out-of-bounds points are clamped into the edge cells (counted once);
    points exactly on an interior boundary go to the lower-index cell.
    """
    u0, u1, v0, v1 = bounds
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    counts = np.zeros((GRID, GRID), dtype=np.int64)
    if len(uv):
        fu = np.clip((uv[:, 0] - u0) / (u1 - u0), 0.0, 1.0)
        fv = np.clip((uv[:, 1] - v0) / (v1 - v0), 0.0, 1.0)
        iu = np.clip(np.ceil(fu * GRID).astype(np.int64) - 1, 0, GRID - 1)
        iv = np.clip(np.ceil(fv * GRID).astype(np.int64) - 1, 0, GRID - 1)
        np.add.at(counts, (iv, iu), 1)
    return FeatureGrid(counts=counts, n_fp=int(len(uv)))


def uniformity(grid):
    """Cross-image feature distribution uniformity in [0, 1]."""
    n = grid.n_fp
    if n <= 1:
        return 0.0
    c = grid.counts[grid.counts > 0].astype(float)
    p = c / n
    return float(-(p * np.log(p)).sum() / np.log(n))


def kmeanspp_centroids(points, K=8, k=3, seed=0):
    """Seeded K-Means++ init plus Lloyd iterations; top-k centroids by size.

    Returns (centroids (k, 2), member_counts (k,)).  Convergence at centroid
    shift < 1e-6 or 100 iterations.  Ordering: member count descending, ties
    by lower centroid x then y.  When fewer than K effective clusters exist,
    sentinel centroids at the image center (0, 0) with zero count pad the tail.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    n = len(pts)
    centers = []
    if n:
        centers.append(pts[int(rng.integers(n))])
        d2 = np.sum((pts - centers[0]) ** 2, axis=1)
        while len(centers) < min(K, n):
            total = d2.sum()
            if total <= 0:
                break
            probs = d2 / total
            centers.append(pts[int(rng.choice(n, p=probs))])
            d2 = np.minimum(d2, np.sum((pts - centers[-1]) ** 2, axis=1))
    centers = np.array(centers) if centers else np.zeros((0, 2))

    counts = np.zeros(len(centers), dtype=np.int64)
    if len(centers):
        for _ in range(100):
            d = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
            assign = np.argmin(d, axis=1)
            new_centers = centers.copy()
            for j in range(len(centers)):
                members = pts[assign == j]
                if len(members):
                    new_centers[j] = members.mean(axis=0)
            shift = np.abs(new_centers - centers).max() if len(centers) else 0.0
            centers = new_centers
            if shift < 1e-6:
                break
        counts = np.bincount(assign, minlength=len(centers))

    # drop empty clusters, order by size then position, pad sentinels
    keep = counts > 0
    centers, counts = centers[keep], counts[keep]
    order = np.lexsort((centers[:, 1], centers[:, 0], -counts)) if len(counts) else []
    centers, counts = centers[order], counts[order]
    out_c = np.zeros((k, 2))
    out_n = np.zeros(k, dtype=np.int64)
    m = min(k, len(counts))
    out_c[:m] = centers[:m]
    out_n[:m] = counts[:m]
    return out_c, out_n


def state_vector(grid, a_current, a_diff, points, bounds, K=8, k=3, seed=0):
    """Flattened grid counts + current action + action difference + top-k
    centroid (x, y, count) summaries; fixed dimension 400 + 2 + 3k."""
    cents, counts = kmeanspp_centroids(points, K=K, k=k, seed=seed)
    return np.concatenate([
        grid.counts.ravel().astype(float),
        [float(a_current), float(a_diff)],
        np.column_stack([cents, counts]).ravel(),
    ])


def reward(grid, a, a_prev, params):
    """Per-step reward r_t and its components."""
    n = float(grid.n_fp)
    r_q = float(np.tanh(0.5 * (1.0 - params.beta) * n))
    r_u = uniformity(grid)
    d = a - a_prev
    r_a = np.exp(-((a - params.mu_a) ** 2) / (2.0 * params.sigma_a ** 2)) \
        / (params.lambda_a * np.sqrt(2.0 * np.pi))
    r_d = np.exp(-((d - params.mu_d) ** 2) / (2.0 * params.sigma_d ** 2)) \
        / (params.lambda_d * np.sqrt(2.0 * np.pi))
    comps = RewardComponents(r_q=r_q, r_u=r_u, r_a=float(r_a), r_d=float(r_d))
    return r_q * r_u + comps.r_a * comps.r_d, comps


def episode_return(rewards, gamma):
    """Discounted return sum_t gamma^t r_t."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must be in [0, 1]")
    rewards = np.asarray(rewards, dtype=float)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


def clamp_action(a):
    a = float(a)
    if a < -1.0 or a > 1.0:
        warnings.warn("policy action %g outside [-1, 1]; clamped" % a)
        return float(np.clip(a, -1.0, 1.0))
    return a


class StationaryPolicy:
    """Holds the camera still."""

    def step(self, state):
        return 0.0


class ScriptedReciprocator:
    """Reproduces the reciprocating spin profile as rate commands.

    Tracks its own step phase (the policy contract passes only the state).
    """

    def __init__(self, amplitude=np.pi / 4, period=10.0, trigger_rate=30.0,
                 action_scale=2.0 * np.pi * 10.0 / 60.0):
        self.amplitude = amplitude
        self.period = period
        self.dt = 1.0 / trigger_rate
        self.scale = action_scale
        self._step = 0

    def step(self, state):
        w = 2.0 * np.pi / self.period
        t = self._step * self.dt
        self._step += 1
        rate = self.amplitude * w * np.cos(w * t)
        return clamp_action(rate / self.scale)


class GreedyController:
    """One-step-lookahead spin controller standing in for a learned policy.

    The episode runner attaches a ``preview(speed) -> FeatureGrid`` callable
    each step; the controller picks the candidate speed maximizing the
    one-step reward, breaking ties toward smaller |speed| and then positive.
    """

    def __init__(self, candidates=(-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0),
                 params=None):
        self.candidates = tuple(candidates)
        self.params = params or RewardParams()
        self._preview = None
        self._a_prev = 0.0

    def set_preview(self, fn):
        self._preview = fn

    def step(self, state):
        if self._preview is None:
            raise RuntimeError("greedy controller needs a simulator preview handle")
        a = self.step_with_preview(self._preview, self._a_prev)
        self._a_prev = a
        return a

    def step_with_preview(self, preview, a_prev):
        best = None
        for speed in self.candidates:
            grid = preview(speed)
            r, _ = reward(grid, speed, a_prev, self.params)
            key = (-r, abs(speed), -np.sign(speed))
            if best is None or key < best[0]:
                best = (key, speed)
        return float(best[1])


class ExternalPolicy:
    """Line-delimited stdio plug-in: state vector out, action back in."""

    def __init__(self, cmd):
        self.proc = subprocess.Popen(
            cmd, shell=isinstance(cmd, str),
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)

    def step(self, state):
        line = "\t".join(repr(float(x)) for x in np.asarray(state).ravel())
        self.proc.stdin.write(line + "\n")
        self.proc.stdin.flush()
        out = self.proc.stdout.readline()
        if not out:
            raise RuntimeError("external policy closed its output stream")
        return clamp_action(float(out.strip()))

    def close(self):
        try:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
        except Exception:
            self.proc.kill()
