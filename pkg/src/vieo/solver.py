"""Manifold-aware sparse Levenberg-Marquardt with marginalization.

The solver operates on ``Block`` variables (each carrying a boxplus chart:
plain vector addition, SO(3) right perturbation, or the unit-sphere chart)
and ``Factor`` residuals that return whitened residuals plus analytic
Jacobians taken in each block's tangent chart.

Cost convention: ``F = 0.5 * sum_i rho_i(||r_i||^2)`` with an optional Huber
loss per factor (threshold in whitened units).

Damping follows the classic schedule: lambda starts at 1e-4, multiplies by 10
on a rejected step and divides by 10 on an accepted one.  Inverse-depth style
blocks can be Schur-eliminated each iteration via ``solve(..., eliminate=...)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geom

VECTOR = "vector"
SO3 = "so3"
SPHERE = "sphere"


class Block:
    """One optimization variable with an attached manifold chart.

    ``value`` is a float array: (k,) for vectors, (3, 3) for SO(3), a unit
    (3,) for the sphere.  Frozen blocks keep their value bit-identical through
    any solve.
    """

    __slots__ = ("value", "manifold", "frozen", "name")

    def __init__(self, value, manifold=VECTOR, frozen=False, name=""):
        value = np.array(value, dtype=float)
        if manifold == SO3 and value.shape != (3, 3):
            raise ValueError("SO(3) block value must be a 3x3 matrix")
        if manifold == SPHERE:
            if value.shape != (3,):
                raise ValueError("sphere block value must be a 3-vector")
            n = np.linalg.norm(value)
            if abs(n - 1.0) > 1e-9:
                raise ValueError("sphere block value must be unit norm")
        self.value = value
        self.manifold = manifold
        self.frozen = bool(frozen)
        self.name = name

    @property
    def tangent_dim(self):
        if self.manifold == SO3:
            return 3
        if self.manifold == SPHERE:
            return 2
        return self.value.size

    @property
    def ambient_dim(self):
        return self.value.size

    def boxplus(self, delta):
        """Value after applying a tangent increment (does not mutate)."""
        if self.manifold == SO3:
            return self.value @ geom.so3_exp(delta)
        if self.manifold == SPHERE:
            return geom.sphere_boxplus(self.value, delta)
        return self.value + np.asarray(delta, dtype=float).reshape(self.value.shape)

    def boxminus(self, ref):
        """Tangent coordinates of the current value in the chart at ``ref``."""
        if self.manifold == SO3:
            return geom.so3_log(np.asarray(ref).T @ self.value)
        if self.manifold == SPHERE:
            return geom.sphere_boxminus(self.value, ref)
        return (self.value - np.asarray(ref, dtype=float)).ravel()


class Factor:
    """Base residual block.

    Subclasses define ``blocks`` (list of Block), ``dim`` and implement
    ``eval(with_jac)`` returning ``(r, jacs)`` where ``r`` is the whitened
    residual of length ``dim`` and ``jacs`` is a list of (dim, tangent_dim)
    arrays aligned with ``blocks`` (or None when ``with_jac`` is False).
    ``huber`` is a threshold in whitened units, or None for a plain L2 loss.
    """

    huber = None
    name = ""

    def eval(self, with_jac=False):
        raise NotImplementedError


class FnFactor(Factor):
    """Residual defined by callables (used for small problems and tests)."""

    def __init__(self, blocks, dim, fn, jac_fn=None, huber=None, name=""):
        self.blocks = list(blocks)
        self.dim = dim
        self._fn = fn
        self._jac_fn = jac_fn
        self.huber = huber
        self.name = name

    def eval(self, with_jac=False):
        values = [b.value for b in self.blocks]
        r = np.asarray(self._fn(*values), dtype=float).ravel()
        if not with_jac:
            return r, None
        if self._jac_fn is None:
            raise RuntimeError("factor %r has no analytic jacobian" % (self.name,))
        jacs = [np.asarray(J, dtype=float) for J in self._jac_fn(*values)]
        return r, jacs


class LinearPriorFactor(Factor):
    """Linear residual r(x) = r0 + sum_k J_k * (x_k [-] lin_k) from marginalization."""

    def __init__(self, blocks, jacs, r0, lin_values, clamped=False, name="prior"):
        self.blocks = list(blocks)
        self.jacs = [np.asarray(J, dtype=float) for J in jacs]
        self.r0 = np.asarray(r0, dtype=float)
        self.lin_values = [np.array(v, dtype=float) for v in lin_values]
        self.dim = self.r0.size
        self.clamped = clamped
        self.name = name

    def eval(self, with_jac=False):
        r = self.r0.copy()
        for blk, J, lin in zip(self.blocks, self.jacs, self.lin_values):
            r = r + J @ blk.boxminus(lin)
        return r, (self.jacs if with_jac else None)


class BatchFactor:
    """A homogeneous batch of residuals sharing one block-slot layout.

    Subclasses define ``n`` rows, ``dim`` per row, ``n_slots`` and implement

    * ``slot_blocks()``  -> list of ``n_slots`` lists of per-row Block refs
    * ``eval_batch(with_jac)`` -> ``(R, jacs, valid)`` with ``R: (n, dim)``,
      ``jacs`` a list of (n, dim, tdim_slot) arrays (or None) and ``valid`` a
      boolean row mask (gated rows drop out of the current iteration).
    """

    huber = None
    name = ""

    def slot_blocks(self):
        raise NotImplementedError

    def eval_batch(self, with_jac=False):
        raise NotImplementedError


@dataclass
class SolveOptions:
    max_iterations: int = 200
    cost_tol: float = 1e-10       # relative cost change
    grad_tol: float = 1e-10       # gradient infinity norm
    cost_abs_tol: float = 0.0     # stop when the cost itself falls below this
    init_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    max_inner: int = 12           # rejected trials per outer iteration


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    reason: str
    grad_inf_norm: float
    accepted_steps: int = 0
    messages: list = field(default_factory=list)


def _huber_weights(R, delta):
    """Per-row sqrt IRLS weights and rho cost terms for a Huber loss."""
    s = np.linalg.norm(R, axis=-1)
    if delta is None:
        return np.ones_like(s), s * s
    w = np.where(s <= delta, 1.0, delta / np.where(s > 0, s, 1.0))
    rho = np.where(s <= delta, s * s, delta * (2.0 * s - delta))
    return np.sqrt(w), rho


class Problem:
    """A least-squares problem over registered blocks and factors."""

    def __init__(self):
        self.factors = []
        self.batches = []
        self._blocks = {}  # id(block) -> block, insertion ordered

    # ------------------------------------------------------------------ setup
    def add(self, factor):
        if isinstance(factor, BatchFactor):
            self.batches.append(factor)
            for slot in factor.slot_blocks():
                for b in slot:
                    self._blocks.setdefault(id(b), b)
        else:
            self.factors.append(factor)
            for b in factor.blocks:
                self._blocks.setdefault(id(b), b)
        return factor

    def blocks(self):
        return list(self._blocks.values())

    # ------------------------------------------------------------------- cost
    def evaluate_cost(self):
        total = 0.0
        for f in self.factors:
            r, _ = f.eval(False)
            if not np.all(np.isfinite(r)):
                return np.inf
            _, rho = _huber_weights(r[None, :], f.huber)
            total += float(rho[0])
        for bf in self.batches:
            R, _, valid = bf.eval_batch(False)
            if not np.all(np.isfinite(R[valid])):
                return np.inf
            _, rho = _huber_weights(R, bf.huber)
            total += float(np.sum(rho[valid]))
        return 0.5 * total

    # ----------------------------------------------------------- lin. algebra
    def _offsets(self, eliminate):
        """Assign tangent offsets: free blocks first, eliminated blocks last."""
        elim_ids = {id(b) for b in eliminate}
        head, tail = [], []
        for b in self._blocks.values():
            if b.frozen:
                continue
            (tail if id(b) in elim_ids else head).append(b)
        offmap, off = {}, 0
        for b in head:
            offmap[id(b)] = off
            off += b.tangent_dim
        n_free = off
        for b in tail:
            offmap[id(b)] = off
            off += b.tangent_dim
        return offmap, n_free, off

    def _assemble(self, offmap, total_dim, cache=None):
        """Dense H and gradient g of the Gauss-Newton system; returns also cost.

        ``cache`` memoizes the scatter groupings, which are fixed while the
        block offsets are (i.e. for the duration of one solve).
        """
        cache = cache if cache is not None else {}
        H = np.zeros((total_dim, total_dim))
        g = np.zeros(total_dim)
        cost = 0.0
        bad = self._assemble_simple(H, g, offmap)
        if bad is not None:
            return None, None, None, bad
        for bi, bf in enumerate(self.batches):
            R, jacs, valid = bf.eval_batch(True)
            if not np.all(np.isfinite(R[valid])):
                return None, None, None, getattr(bf, "name", "batch")
            w, rho = _huber_weights(R, bf.huber)
            cost += float(np.sum(rho[valid]))
            w = np.where(valid, w, 0.0)
            Rw = R * w[:, None]
            tkey = ("tables", bi)
            if tkey not in cache:
                cache[tkey] = self._slot_offset_tables(bf, offmap)
            tables = cache[tkey]
            n_slots = len(jacs)
            Jw = [jacs[k] * w[:, None, None] for k in range(n_slots)]
            for k in range(n_slots):
                offs_k = tables[k]
                use_k = offs_k >= 0
                if not np.any(use_k):
                    continue
                Gk = np.einsum("nri,nr->ni", Jw[k], Rw)
                _scatter_vec(g, offs_k, Gk, use_k, cache, (bi, k))
                for l in range(k, n_slots):
                    offs_l = tables[l]
                    use = use_k & (offs_l >= 0)
                    if not np.any(use):
                        continue
                    C = np.einsum("nri,nrj->nij", Jw[k], Jw[l])
                    _scatter_mat(H, offs_k, offs_l, C, use, (k != l),
                                 cache, (bi, k, l))
        cost += self._cost_only_simple_accumulated
        H = 0.5 * (H + H.T)
        return H, g, 0.5 * cost, None

    def _assemble_simple(self, H, g, offmap):
        """Accumulate simple factors into H, g; stores their cost sum."""
        acc = 0.0
        for f in self.factors:
            r, jacs = f.eval(True)
            if not np.all(np.isfinite(r)):
                return getattr(f, "name", "factor")
            w, rho = _huber_weights(r[None, :], f.huber)
            acc += float(rho[0])
            sw = w[0]
            rw = r * sw
            for k, (bk, Jk) in enumerate(zip(f.blocks, jacs)):
                ok = offmap.get(id(bk))
                if ok is None:
                    continue
                Jkw = Jk * sw
                tk = bk.tangent_dim
                g[ok:ok + tk] += Jkw.T @ rw
                for l in range(k, len(f.blocks)):
                    bl = f.blocks[l]
                    ol = offmap.get(id(bl))
                    if ol is None:
                        continue
                    Jlw = jacs[l] * sw
                    Cb = Jkw.T @ Jlw
                    tl = bl.tangent_dim
                    H[ok:ok + tk, ol:ol + tl] += Cb
                    if l != k:
                        H[ol:ol + tl, ok:ok + tk] += Cb.T
        self._cost_only_simple_accumulated = acc
        return None

    def _slot_offset_tables(self, bf, offmap):
        """Per-slot (n,) offset arrays; -1 marks frozen/absent blocks."""
        custom = getattr(bf, "offset_table", None)
        if custom is not None:
            return custom(offmap)
        tables = []
        for slot in bf.slot_blocks():
            tables.append(np.array([offmap.get(id(b), -1) for b in slot], dtype=np.int64))
        return tables

    # ------------------------------------------------------------------ solve
    def solve(self, options=None, eliminate=()):
        opts = options or SolveOptions()
        offmap, n_free, total = self._offsets(eliminate)
        if total == 0:
            c = self.evaluate_cost()
            return SolveReport(c, c, 0, "no_free_blocks", 0.0)

        saved = None
        cost = self.evaluate_cost()
        if not np.isfinite(cost):
            return SolveReport(cost, cost, 0, "nonfinite", np.inf,
                               messages=["non-finite residual at initial point"])
        initial_cost = cost
        lam = opts.init_lambda
        reason = "max_iterations"
        grad_norm = np.inf
        accepted = 0
        it = 0

        if cost < opts.cost_abs_tol:
            return SolveReport(initial_cost, cost, 0, "cost", 0.0)

        cache = {}
        while it < opts.max_iterations:
            it += 1
            H, g, cost_lin, bad = self._assemble(offmap, total, cache)
            if bad is not None:
                return SolveReport(initial_cost, cost, it, "nonfinite", grad_norm,
                                   accepted, ["non-finite residual in block %r" % bad])
            cost = cost_lin
            grad_norm = float(np.abs(g).max()) if g.size else 0.0
            if grad_norm < opts.grad_tol:
                reason = "gradient"
                break

            diag = np.diagonal(H).copy()
            step_ok = False
            singular = False
            # first trial is the undamped Gauss-Newton step; on rejection fall
            # back to the damped schedule (x10 on reject, /10 on accept)
            gauss_newton = True
            for _ in range(opts.max_inner):
                delta = self._solve_damped(H, g, diag, 0.0 if gauss_newton else lam, n_free)
                if delta is None:
                    if gauss_newton:
                        gauss_newton = False
                        continue
                    lam *= opts.lambda_up
                    singular = True
                    continue
                singular = False
                saved = [b.value for b in self._blocks.values() if not b.frozen]
                try:
                    self._apply(offmap, delta)
                except geom.SphereChartError:
                    self._restore(saved)
                    if gauss_newton:
                        gauss_newton = False
                        continue
                    lam *= opts.lambda_up
                    continue
                new_cost = self.evaluate_cost()
                if np.isfinite(new_cost) and new_cost < cost:
                    if not gauss_newton:
                        lam = max(lam / opts.lambda_down, 1e-15)
                    accepted += 1
                    step_ok = True
                    break
                self._restore(saved)
                if gauss_newton:
                    gauss_newton = False
                else:
                    lam *= opts.lambda_up
            if singular:
                reason = "singular"
                break
            if not step_ok:
                # no descent direction at any tried damping: treat as converged
                reason = "cost"
                break
            rel = (cost - new_cost) / max(cost, 1e-300)
            cost = new_cost
            if rel < opts.cost_tol or cost < opts.cost_abs_tol:
                reason = "cost"
                break

        return SolveReport(initial_cost, cost, it, reason, grad_norm, accepted)

    def _solve_damped(self, H, g, diag, lam, n_free):
        damp = lam * diag
        A = H + np.diag(damp)
        nf = n_free
        try:
            if nf == A.shape[0]:
                np.linalg.cholesky(A)
                return np.linalg.solve(A, -g)
            # Schur-eliminate the trailing landmark part (must be 1x1 diagonal)
            App = A[:nf, :nf]
            Apl = A[:nf, nf:]
            dl = np.diagonal(A)[nf:].copy()
            # fully gated landmark rows leave a zero diagonal and zero
            # gradient; give them a unit pivot so the step is zero there
            dl[dl <= 0] = 1.0
            inv_dl = 1.0 / dl
            Hred = App - (Apl * inv_dl[None, :]) @ Apl.T
            gred = -g[:nf] + Apl @ (inv_dl * g[nf:])
            np.linalg.cholesky(Hred)
            dp = np.linalg.solve(Hred, gred)
            dlm = inv_dl * (-g[nf:] - Apl.T @ dp)
            return np.concatenate([dp, dlm])
        except np.linalg.LinAlgError:
            return None

    def _apply(self, offmap, delta):
        for b in self._blocks.values():
            off = offmap.get(id(b))
            if off is None:
                continue
            b.value = b.boxplus(delta[off:off + b.tangent_dim])

    def _restore(self, saved):
        i = 0
        for b in self._blocks.values():
            if not b.frozen:
                b.value = saved[i]
                i += 1

    # -------------------------------------------------------------- jacobians
    def check_jacobians(self, step=1e-6):
        """Compare analytic Jacobians with central differences in each block's chart.

        Returns ``{(factor_name_or_index, block_name_or_index): max_rel_error}``;
        the relative scale is the largest entry of either Jacobian (floored at
        1e-9) so a sign-flipped Jacobian reports an error of about 2.
        """
        report = {}
        items = [("f%d" % i if not f.name else f.name, f) for i, f in enumerate(self.factors)]
        items += [("b%d" % i if not bf.name else bf.name, bf) for i, bf in enumerate(self.batches)]
        for fname, f in items:
            if isinstance(f, BatchFactor):
                R0, jacs, valid = f.eval_batch(True)
                slots = f.slot_blocks()
                uniq = {}
                for k, slot in enumerate(slots):
                    for i, b in enumerate(slot):
                        uniq.setdefault(id(b), (b, []))[1].append((k, i))
                for bid, (b, refs) in uniq.items():
                    if b.frozen:
                        continue
                    td = b.tangent_dim
                    num = np.zeros((R0.size, td))
                    ana = np.zeros((R0.size, td))
                    base = b.value
                    for d in range(td):
                        e = np.zeros(td)
                        e[d] = step
                        b.value = b.boxplus(e)
                        rp, _, _ = f.eval_batch(False)
                        b.value = base
                        b.value = b.boxplus(-e)
                        rm, _, _ = f.eval_batch(False)
                        b.value = base
                        num[:, d] = ((rp - rm) / (2.0 * step)).ravel()
                    for (k, i) in refs:
                        ana[i * f.dim:(i + 1) * f.dim, :] += jacs[k][i]
                    key = (fname, b.name or "blk")
                    report[key] = _rel_err(num, ana)
            else:
                r0, jacs = f.eval(True)
                for k, b in enumerate(f.blocks):
                    if b.frozen:
                        continue
                    td = b.tangent_dim
                    num = np.zeros((r0.size, td))
                    base = b.value
                    for d in range(td):
                        e = np.zeros(td)
                        e[d] = step
                        b.value = b.boxplus(e)
                        rp, _ = f.eval(False)
                        b.value = base
                        b.value = b.boxplus(-e)
                        rm, _ = f.eval(False)
                        b.value = base
                        num[:, d] = (rp - rm) / (2.0 * step)
                    ana = np.zeros_like(num)
                    for l, bl in enumerate(f.blocks):
                        if bl is b:
                            ana += jacs[l]
                    key = (fname, b.name or ("blk%d" % k))
                    report[key] = _rel_err(num, ana)
        return report

    # ---------------------------------------------------------- marginalization
    def marginalize(self, blocks_to_remove):
        """Schur-eliminate blocks, returning a linear prior over their neighbors.

        Factors touching a removed block are consumed (removed from the
        problem).  Frozen blocks are treated as constants: frozen removed
        blocks are baked into the prior at their current value rather than
        eliminated.  Returns None when nothing connects to the removed blocks.
        """
        removed_ids = {id(b) for b in blocks_to_remove}
        rel_f = [f for f in self.factors if any(id(b) in removed_ids for b in f.blocks)]
        rel_b = [bf for bf in self.batches
                 if any(id(b) in removed_ids for slot in bf.slot_blocks() for b in slot)]
        for b in blocks_to_remove:
            self._blocks.pop(id(b), None)
        if not rel_f and not rel_b:
            return None

        involved = {}
        for f in rel_f:
            for b in f.blocks:
                involved.setdefault(id(b), b)
        for bf in rel_b:
            for slot in bf.slot_blocks():
                for b in slot:
                    involved.setdefault(id(b), b)

        rem_free = [b for b in involved.values() if id(b) in removed_ids and not b.frozen]
        keep = [b for b in involved.values() if id(b) not in removed_ids and not b.frozen]

        offmap, off = {}, 0
        for b in rem_free + keep:
            offmap[id(b)] = off
            off += b.tangent_dim
        nr = sum(b.tangent_dim for b in rem_free)

        sub = Problem()
        for f in rel_f:
            sub.add(f)
        for bf in rel_b:
            sub.add(bf)
        H, g, _, bad = sub._assemble(offmap, off)
        if bad is not None:
            raise RuntimeError("non-finite residual during marginalization (%s)" % bad)

        # consume the factors
        self.factors = [f for f in self.factors if f not in rel_f]
        self.batches = [bf for bf in self.batches if bf not in rel_b]

        if nr == 0:
            Ht, gt = H, g
        else:
            Hrr = H[:nr, :nr]
            Hrn = H[:nr, nr:]
            Hnn = H[nr:, nr:]
            # regularize only as much as needed to invert the removed part
            try:
                np.linalg.cholesky(Hrr)
                X = np.linalg.solve(Hrr, Hrn)
            except np.linalg.LinAlgError:
                Hrr = Hrr + 1e-10 * np.eye(nr)
                X = np.linalg.solve(Hrr, Hrn)
            Ht = Hnn - Hrn.T @ X
            gt = g[nr:] - Hrn.T @ np.linalg.solve(Hrr, g[:nr])

        if Ht.shape[0] == 0:
            return None
        Ht = 0.5 * (Ht + Ht.T)
        evals, evecs = np.linalg.eigh(Ht)
        clamped = bool(np.any(evals < -1e-9))
        keep_mask = evals > 1e-12
        if not np.any(keep_mask):
            return None
        lam = evals[keep_mask]
        V = evecs[:, keep_mask]
        sq = np.sqrt(lam)
        Jfull = (V * sq[None, :]).T              # (m, Tn): J^T J = Ht
        r0 = (V / sq[None, :]).T @ gt            # J^T r0 = gt

        jacs, lins = [], []
        col = 0
        cols = {}
        for b in keep:
            cols[id(b)] = (col, col + b.tangent_dim)
            col += b.tangent_dim
        for b in keep:
            c0, c1 = cols[id(b)]
            jacs.append(Jfull[:, c0:c1])
            lins.append(np.array(b.value))
        return LinearPriorFactor(keep, jacs, r0, lins, clamped=clamped)


def _rel_err(num, ana):
    scale = max(np.abs(num).max() if num.size else 0.0,
                np.abs(ana).max() if ana.size else 0.0, 1e-9)
    return float(np.abs(num - ana).max() / scale)


def _scatter_vec(g, offs, G, use, cache=None, key=None):
    plan_key = ("v", key) if cache is not None else None
    plan = cache.get(plan_key) if cache is not None else None
    if plan is None:
        idx = np.nonzero(use)[0]
        if idx.size == 0:
            plan = (idx, None, None)
        else:
            o = offs[idx]
            order = np.argsort(o, kind="stable")
            idx = idx[order]
            o_sorted = o[order]
            starts = np.nonzero(np.r_[True, o_sorted[1:] != o_sorted[:-1]])[0]
            plan = (idx, starts, o_sorted[starts])
        if cache is not None:
            cache[plan_key] = plan
    idx, starts, offs_u = plan
    if idx.size == 0:
        return
    sums = np.add.reduceat(G[idx], starts, axis=0)
    td = G.shape[1]
    for s in range(len(offs_u)):
        off = offs_u[s]
        g[off:off + td] += sums[s]


def _scatter_mat(H, offs_r, offs_c, C, use, also_transpose, cache=None, key=None):
    plan_key = ("m", key) if cache is not None else None
    plan = cache.get(plan_key) if cache is not None else None
    if plan is None:
        idx = np.nonzero(use)[0]
        if idx.size == 0:
            plan = (idx, None, None, None)
        else:
            orow = offs_r[idx]
            ocol = offs_c[idx]
            k2 = orow * (H.shape[0] + 1) + ocol
            order = np.argsort(k2, kind="stable")
            idx = idx[order]
            k_s = k2[order]
            starts = np.nonzero(np.r_[True, k_s[1:] != k_s[:-1]])[0]
            n = H.shape[0] + 1
            uk = k_s[starts]
            plan = (idx, starts, (uk // n).astype(np.int64), (uk % n).astype(np.int64))
        if cache is not None:
            cache[plan_key] = plan
    idx, starts, rows_u, cols_u = plan
    if idx.size == 0:
        return
    sums = np.add.reduceat(C[idx], starts, axis=0)
    tr, tc = C.shape[1], C.shape[2]
    for s in range(len(rows_u)):
        orr = rows_u[s]
        occ = cols_u[s]
        H[orr:orr + tr, occ:occ + tc] += sums[s]
        if also_transpose:
            H[occ:occ + tc, orr:orr + tr] += sums[s].T
