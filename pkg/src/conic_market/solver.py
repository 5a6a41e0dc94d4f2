"""Embedded primal-dual interior-point solver for SOCPs.

Solves ``min c'x  s.t.  A x + s = b, s in K`` over products of zero,
nonnegative, second-order and rotated second-order cones, via the
homogeneous self-dual embedding with Nesterov-Todd scaling and a Mehrotra
predictor-corrector. Infeasible problems terminate with Farkas-type
certificate rays instead of a solution.

Internally rotated cones are conjugated into standard second-order cones by
the orthogonal map ((u+v)/sqrt2, (u-v)/sqrt2, w); reported slacks and duals
are mapped back, so programs keep their rotated rows and duals stay readable
in rotated coordinates. Per-iteration linear algebra reduces the KKT system
to a quasi-definite (n + n_eq) system factorized with SuperLU in symmetric
mode under static regularization, plus iterative refinement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cones import (
    Cone,
    ConeKind,
    ConicProgram,
    SolveResult,
    SolveStatus,
)

_SQRT2 = np.sqrt(2.0)


@dataclass
class SolverSettings:
    max_iterations: int = 200
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    static_regularization: float = 1e-9
    equilibrate: bool = True
    verbose: bool = False
    refine_steps: int = 2
    ruiz_sweeps: int = 10
    step_fraction: float = 0.99

    def __post_init__(self):
        if self.feas_tol <= 0 or self.gap_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


class _ConeLayout:
    """Row permutation [zero | nonneg | soc] and rotated-cone conjugation."""

    def __init__(self, program: ConicProgram):
        zero_rows, nn_rows, soc_rows = [], [], []
        soc_dims = []
        rot_heads = []  # head positions (within soc segment) of rotated blocks
        start = 0
        for cone in program.cones:
            rows = list(range(start, start + cone.dim))
            if cone.kind is ConeKind.ZERO:
                zero_rows.extend(rows)
            elif cone.kind is ConeKind.NONNEGATIVE:
                nn_rows.extend(rows)
            elif cone.kind is ConeKind.SECOND_ORDER:
                soc_dims.append(cone.dim)
                soc_rows.extend(rows)
            else:  # rotated
                rot_heads.append(sum(soc_dims))
                soc_dims.append(cone.dim)
                soc_rows.extend(rows)
            start += cone.dim
        self.perm = np.array(zero_rows + nn_rows + soc_rows, dtype=np.int64)
        self.n_eq = len(zero_rows)
        self.n_nn = len(nn_rows)
        self.soc_dims = np.array(soc_dims, dtype=np.int64)
        self.n_soc_rows = int(self.soc_dims.sum())
        self.soc_starts = np.concatenate(
            ([0], np.cumsum(self.soc_dims)))[:-1].astype(np.int64) if soc_dims else np.zeros(0, np.int64)
        self.rot_heads = np.array(rot_heads, dtype=np.int64)
        self.m = program.num_rows

    def rotate(self, v_soc: np.ndarray) -> np.ndarray:
        """Apply the orthogonal rotated->soc map in place on soc-segment vector."""
        if self.rot_heads.size:
            h = self.rot_heads
            u, w = v_soc[h].copy(), v_soc[h + 1].copy()
            v_soc[h] = (u + w) / _SQRT2
            v_soc[h + 1] = (u - w) / _SQRT2
        return v_soc

    def rotation_matrix(self) -> sp.csr_matrix | None:
        if not self.rot_heads.size:
            return None
        n = self.n_soc_rows
        diag = np.ones(n)
        rows = list(range(n))
        cols = list(range(n))
        vals = list(diag)
        for h in self.rot_heads:
            # overwrite the 2x2 head block
            vals[h] = 0.0
            vals[h + 1] = 0.0
            rows += [h, h, h + 1, h + 1]
            cols += [h, h + 1, h, h + 1]
            vals += [1 / _SQRT2, 1 / _SQRT2, 1 / _SQRT2, -1 / _SQRT2]
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class _SocOps:
    """Vectorized Jordan/NT operations over concatenated SOC blocks."""

    def __init__(self, dims: np.ndarray, starts: np.ndarray):
        self.dims = dims
        self.starts = starts
        self.nblk = len(dims)
        self.total = int(dims.sum())
        self.rep = np.repeat(np.arange(self.nblk), dims) if self.nblk else np.zeros(0, np.int64)

    def bdot(self, u, v):
        if not self.nblk:
            return np.zeros(0)
        return np.add.reduceat(u * v, self.starts)

    def jdot(self, u, v):
        heads = self.starts
        return 2.0 * u[heads] * v[heads] - self.bdot(u, v)

    def expand(self, per_block):
        return per_block[self.rep]

    def jmul(self, v):
        out = -v
        out[self.starts] = v[self.starts]
        return out

    def identity(self):
        e = np.zeros(self.total)
        e[self.starts] = 1.0
        return e

    def prod(self, u, v):
        """Jordan product u o v."""
        u0 = self.expand(u[self.starts])
        v0 = self.expand(v[self.starts])
        out = u * v0 + v * u0
        out[self.starts] = self.bdot(u, v)
        return out

    def div(self, lam, d):
        """Solve lam o w = d per block."""
        heads = self.starts
        lam0 = lam[heads]
        det = lam0 ** 2 - (self.bdot(lam, lam) - lam0 ** 2)
        lam_d_tail = self.bdot(lam, d) - lam0 * d[heads]
        w0 = (lam0 * d[heads] - lam_d_tail) / det
        out = (d - self.expand(w0) * lam) / self.expand(lam0)
        out[heads] = w0
        return out

    def min_eig_margin(self, v):
        """Per-block t - ||w||, the distance-to-boundary measure."""
        heads = self.starts
        tails = self.bdot(v, v) - v[heads] ** 2
        return v[heads] - np.sqrt(np.maximum(tails, 0.0))

    def step_to_boundary(self, u, du):
        """Largest alpha with u + alpha*du in the cone (u interior)."""
        if not self.nblk:
            return np.inf
        heads = self.starts
        a = du[heads] ** 2 - (self.bdot(du, du) - du[heads] ** 2)
        b = 2.0 * (u[heads] * du[heads] - (self.bdot(u, du) - u[heads] * du[heads]))
        c = u[heads] ** 2 - (self.bdot(u, u) - u[heads] ** 2)
        c = np.maximum(c, 0.0)
        alpha = np.full(self.nblk, np.inf)
        # roots of a t^2 + b t + c = 0; g(0) = c >= 0, want first positive crossing
        disc = b ** 2 - 4.0 * a * c
        has_root = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            # stable quadratic roots
            q = -0.5 * (b + np.sign(b) * sq)
            q = np.where(b == 0.0, -0.5 * sq, q)
            r1 = np.where(a != 0.0, q / np.where(a == 0.0, 1.0, a), np.inf)
            r2 = np.where(q != 0.0, c / np.where(q == 0.0, 1.0, q), np.inf)
        for r in (r1, r2):
            pos = has_root & np.isfinite(r) & (r > 1e-14)
            alpha = np.where(pos & (r < alpha), r, alpha)
        # head must stay nonnegative
        neg_head = du[heads] < 0.0
        head_bound = np.where(neg_head, -u[heads] / np.where(neg_head, du[heads], -1.0), np.inf)
        alpha = np.minimum(alpha, head_bound)
        return float(alpha.min()) if self.nblk else np.inf


class _NTScaling:
    """Nesterov-Todd scaling for the [nonneg | soc] conic segment."""

    def __init__(self, n_nn: int, soc: _SocOps):
        self.n_nn = n_nn
        self.soc = soc

    def update(self, s, z):
        nn = self.n_nn
        s_nn, z_nn = s[:nn], z[:nn]
        if np.any(s_nn <= 0) or np.any(z_nn <= 0):
            raise FloatingPointError("nonneg iterate left the cone")
        self.w2_nn = s_nn / z_nn         # W^2 diagonal
        self.lam_nn = np.sqrt(s_nn * z_nn)

        so = self.soc
        s_s, z_s = s[nn:], z[nn:]
        if so.nblk:
            a_s2 = so.jdot(s_s, s_s)
            a_z2 = so.jdot(z_s, z_s)
            if np.any(a_s2 <= 0) or np.any(a_z2 <= 0):
                raise FloatingPointError("soc iterate left the cone")
            a_s = np.sqrt(a_s2)
            a_z = np.sqrt(a_z2)
            sbar = s_s / so.expand(a_s)
            zbar = z_s / so.expand(a_z)
            gamma = np.sqrt((1.0 + so.bdot(sbar, zbar)) / 2.0)
            wbar = (sbar + so.jmul(zbar)) / so.expand(2.0 * gamma)
            self.wbar = wbar
            self.wbar0 = wbar[so.starts]
            self.eta2 = np.sqrt(a_s2 / a_z2)
            self.eta = np.sqrt(np.sqrt(a_s2 / a_z2))
        if so.nblk:
            self.lam = np.concatenate([self.lam_nn, self._w_soc(z_s)])
        else:
            self.lam = self.lam_nn.copy()

    # -- soc W operators ---------------------------------------------------
    def _wbar_apply(self, v, flip):
        """W-bar v (flip=False) or W-bar^{-1} v (flip=True)."""
        so = self.soc
        w = so.jmul(self.wbar) if flip else self.wbar
        w0 = w[so.starts]
        wv = so.bdot(w, v)
        head_extra = wv - w0 * v[so.starts]  # w_tail' v_tail
        out = v + so.expand((v[so.starts] + head_extra / (1.0 + w0))) * w
        out[so.starts] = w0 * v[so.starts] + head_extra
        return out

    def _w_soc(self, v):
        return self._wbar_apply(v, flip=False) * self.soc.expand(self.eta)

    def _winv_soc(self, v):
        return self._wbar_apply(v, flip=True) / self.soc.expand(self.eta)

    def _w2_soc(self, v):
        so = self.soc
        t = so.bdot(self.wbar, v)
        return (2.0 * self.wbar * so.expand(t) - so.jmul(v)) * so.expand(self.eta2)

    def _w2inv_soc(self, v):
        so = self.soc
        q = so.jmul(self.wbar)
        t = so.bdot(q, v)
        return (2.0 * q * so.expand(t) - so.jmul(v)) / so.expand(self.eta2)

    # -- full-segment operators ---------------------------------------------
    def w(self, v):
        nn = self.n_nn
        out = np.empty_like(v)
        out[:nn] = np.sqrt(self.w2_nn) * v[:nn]
        if self.soc.nblk:
            out[nn:] = self._w_soc(v[nn:])
        return out

    def winv(self, v):
        nn = self.n_nn
        out = np.empty_like(v)
        out[:nn] = v[:nn] / np.sqrt(self.w2_nn)
        if self.soc.nblk:
            out[nn:] = self._winv_soc(v[nn:])
        return out

    def w2(self, v):
        nn = self.n_nn
        out = np.empty_like(v)
        out[:nn] = self.w2_nn * v[:nn]
        if self.soc.nblk:
            out[nn:] = self._w2_soc(v[nn:])
        return out

    def w2inv(self, v):
        nn = self.n_nn
        out = np.empty_like(v)
        out[:nn] = v[:nn] / self.w2_nn
        if self.soc.nblk:
            out[nn:] = self._w2inv_soc(v[nn:])
        return out

    def w2inv_parts(self):
        """W^{-2} = diag(d) + U U' over the whole conic segment."""
        so = self.soc
        d = np.empty(self.n_nn + so.total)
        d[:self.n_nn] = 1.0 / self.w2_nn
        ucols = None
        if so.nblk:
            dsoc = np.ones(so.total)
            dsoc[so.starts] = -1.0
            d[self.n_nn:] = dsoc / so.expand(self.eta2)
            q = so.jmul(self.wbar) * so.expand(_SQRT2 / self.eta)
            rows = self.n_nn + np.arange(so.total)
            indptr = np.concatenate([so.starts, [so.total]])
            ucols = sp.csc_matrix(
                (q, rows, indptr), shape=(self.n_nn + so.total, so.nblk)
            )
        return d, ucols

    # -- jordan algebra over the whole conic segment ------------------------
    def jprod(self, u, v):
        nn = self.n_nn
        out = np.empty_like(u)
        out[:nn] = u[:nn] * v[:nn]
        if self.soc.nblk:
            out[nn:] = self.soc.prod(u[nn:], v[nn:])
        return out

    def jdiv(self, lam, d):
        nn = self.n_nn
        out = np.empty_like(d)
        out[:nn] = d[:nn] / lam[:nn]
        if self.soc.nblk:
            out[nn:] = self.soc.div(lam[nn:], d[nn:])
        return out

    def identity(self):
        e = np.ones(self.n_nn + self.soc.total)
        if self.soc.nblk:
            e[self.n_nn:] = self.soc.identity()
        return e

    def step_to_boundary(self, u, du):
        nn = self.n_nn
        alpha = np.inf
        neg = du[:nn] < 0
        if np.any(neg):
            alpha = float(np.min(-u[:nn][neg] / du[:nn][neg]))
        if self.soc.nblk:
            alpha = min(alpha, self.soc.step_to_boundary(u[nn:], du[nn:]))
        return alpha


def _ruiz_equilibrate(a: sp.csc_matrix, block_of_row: np.ndarray, n_blocks: int, sweeps: int):
    """Block-uniform Ruiz scaling; rows of one cone block share a scale."""
    m, n = a.shape
    d_r = np.ones(m)
    d_c = np.ones(n)
    e = a.copy()
    for _ in range(sweeps):
        e_abs = abs(e)
        row_norm = e_abs.max(axis=1).toarray().ravel()
        blk = np.zeros(n_blocks)
        np.maximum.at(blk, block_of_row, row_norm)
        blk[blk == 0] = 1.0
        dr = 1.0 / np.sqrt(blk[block_of_row])
        col_norm = e_abs.max(axis=0).toarray().ravel()
        col_norm[col_norm == 0] = 1.0
        dc = 1.0 / np.sqrt(col_norm)
        if np.max(np.abs(1 - dr ** 2)) < 0.01 and np.max(np.abs(1 - dc ** 2)) < 0.01:
            break
        e = sp.diags(dr) @ e @ sp.diags(dc)
        d_r *= dr
        d_c *= dc
    return e.tocsc(), d_r, d_c


def solve(program: ConicProgram, settings: SolverSettings | None = None) -> SolveResult:
    """Solve the conic program; deterministic for identical inputs."""
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    try:
        return _solve_inner(program, settings, t0)
    except FloatingPointError as exc:
        n, m = program.num_vars, program.num_rows
        return SolveResult(
            status=SolveStatus.NUMERICAL_ERROR,
            primal=np.full(n, np.nan),
            slack=np.full(m, np.nan),
            dual=np.full(m, np.nan),
            primal_objective=np.nan,
            dual_objective=np.nan,
            gap=np.nan,
            iterations=0,
            info={"error": str(exc), "time": time.perf_counter() - t0},
        )


def _solve_inner(program: ConicProgram, settings: SolverSettings, t0: float) -> SolveResult:
    layout = _ConeLayout(program)
    n = program.num_vars
    m = program.num_rows
    perm = layout.perm

    a_perm = program.constraint_matrix[perm]
    b_perm = program.constraint_offset[perm]
    rot = layout.rotation_matrix()
    if rot is not None:
        seg = slice(layout.n_eq + layout.n_nn, m)
        a_perm = sp.vstack(
            [a_perm[: layout.n_eq + layout.n_nn], rot @ a_perm[seg]]
        ).tocsc()
        b_soc = b_perm[seg].copy()
        b_perm = b_perm.copy()
        b_perm[seg] = layout.rotate(b_soc)

    c_orig = program.objective
    a_orig, b_orig = a_perm, b_perm.copy()

    # block index of each permuted row (zero/nonneg rows are their own block)
    n_free_rows = layout.n_eq + layout.n_nn
    block_of_row = np.concatenate(
        [
            np.arange(n_free_rows),
            n_free_rows + np.repeat(np.arange(len(layout.soc_dims)), layout.soc_dims),
        ]
    ).astype(np.int64) if layout.soc_dims.size else np.arange(m)
    n_blocks = n_free_rows + len(layout.soc_dims)

    if settings.equilibrate and m and n:
        a_s, d_r, d_c = _ruiz_equilibrate(a_perm, block_of_row, n_blocks, settings.ruiz_sweeps)
        b_s = d_r * b_perm
        c_s = d_c * c_orig
        sigma_b = 1.0 / max(1.0, np.max(np.abs(b_s), initial=0.0))
        sigma_c = 1.0 / max(1.0, np.max(np.abs(c_s), initial=0.0))
        b_s = b_s * sigma_b
        c_s = c_s * sigma_c
    else:
        a_s, d_r, d_c = a_perm.tocsc(), np.ones(m), np.ones(n)
        sigma_b = sigma_c = 1.0
        b_s, c_s = b_perm.copy(), c_orig.copy()

    ne, nn = layout.n_eq, layout.n_nn
    a_eq = a_s[:ne]
    a_con = a_s[ne:]
    b_eq = b_s[:ne]
    b_con = b_s[ne:]

    soc = _SocOps(layout.soc_dims, layout.soc_starts)
    scaling = _NTScaling(nn, soc)
    mc = nn + soc.total
    deg = nn + soc.nblk

    x = np.zeros(n)
    y_eq = np.zeros(ne)
    s = scaling.identity() if mc else np.zeros(0)
    z = s.copy()
    tau, kappa = 1.0, 1.0

    a_eq_t = a_eq.T.tocsc()
    a_con_t = a_con.T.tocsc()
    at_s = a_s.T.tocsc()

    delta = settings.static_regularization
    eye_n = sp.identity(n, format="csc")
    eye_e = sp.identity(ne, format="csc") if ne else None

    def original_space(xv, y_eq_v, z_v, s_v, tau_val):
        """Map scaled iterate to original (permuted, rotated) coordinates."""
        y_full = np.concatenate([y_eq_v, z_v])
        x_u = d_c * xv * (1.0 / sigma_b) / tau_val
        y_u = d_r * y_full * (1.0 / sigma_c) / tau_val
        s_full = np.concatenate([np.zeros(ne), s_v])
        s_u = s_full / d_r * (1.0 / sigma_b) / tau_val
        return x_u, y_u, s_u

    a_orig_csr = a_orig.tocsr()
    norm_b = 1.0 + np.max(np.abs(program.constraint_offset), initial=0.0)
    norm_c = 1.0 + np.max(np.abs(c_orig), initial=0.0)

    best = None
    best_metric = np.inf
    status = SolveStatus.ITERATION_LIMIT
    iters_done = 0

    for it in range(settings.max_iterations):
        iters_done = it
        # termination on original-space residuals
        x_u, y_u, s_u = original_space(x, y_eq, z, s, tau)
        px = a_orig_csr @ x_u
        pres = np.max(np.abs(px + s_u - b_orig), initial=0.0) / norm_b
        dres = np.max(np.abs(a_orig.T @ y_u + c_orig), initial=0.0) / norm_c
        pcost = float(c_orig @ x_u)
        dcost = float(-b_orig @ y_u)
        gap_rel = abs(pcost - dcost) / (1.0 + max(abs(pcost), abs(dcost)))
        if settings.verbose:
            mu_dbg = (float(s @ z) + tau * kappa) / (deg + 1)
            print(f"iter {it:3d} pres {pres:9.2e} dres {dres:9.2e} gap {gap_rel:9.2e} "
                  f"tau {tau:8.2e} kappa {kappa:8.2e} mu {mu_dbg:8.2e}")
        metric = max(pres / settings.feas_tol, dres / settings.feas_tol,
                     gap_rel / settings.gap_tol)
        if np.isfinite(metric) and metric < best_metric:
            best_metric = metric
            best = (x_u, y_u, s_u, pcost, dcost, gap_rel)
        if metric <= 1.0:
            status = SolveStatus.OPTIMAL
            break

        # infeasibility certificates (on raw scaled iterate, mapped back)
        y_ray = d_r * np.concatenate([y_eq, z]) / sigma_c
        by = float(b_orig @ y_ray)
        if by < -1e-12:
            y_hat = y_ray / (-by)
            if np.max(np.abs(a_orig.T @ y_hat), initial=0.0) <= settings.feas_tol * norm_c:
                status = SolveStatus.PRIMAL_INFEASIBLE
                best = (np.full(n, np.nan), y_hat, np.full(m, np.nan), np.nan, np.nan, np.nan)
                break
        x_ray = d_c * x / sigma_b
        s_ray = np.concatenate([np.zeros(ne), s]) / d_r / sigma_b
        cx = float(c_orig @ x_ray)
        if cx < -1e-12:
            x_hat = x_ray / (-cx)
            s_hat = s_ray / (-cx)
            if np.max(np.abs(a_orig_csr @ x_hat + s_hat), initial=0.0) <= settings.feas_tol * norm_b:
                status = SolveStatus.DUAL_INFEASIBLE
                best = (x_hat, np.full(m, np.nan), s_hat, np.nan, np.nan, np.nan)
                break

        mu_now = (float(s @ z) + tau * kappa) / (deg + 1)
        if mu_now < 1e-15 or not np.isfinite(mu_now):
            break  # at the numerical floor; report the best iterate

        # NT scaling and factorization
        try:
            x, y_eq, z, s, tau, kappa = _iterate_step(
                settings, scaling, s, z, x, y_eq, tau, kappa, deg,
                a_eq, a_con, a_eq_t, a_con_t, at_s, b_eq, b_con, b_s, c_s,
                n, ne, eye_n, eye_e, delta,
            )
        except FloatingPointError as exc:
            if best is None:
                raise
            if settings.verbose:
                print(f"         stopped: {exc}")
            break
    else:
        iters_done = settings.max_iterations - 1

    if best is None:
        x_u, y_u, s_u = original_space(x, y_eq, z, s, tau)
        pcost = float(c_orig @ x_u)
        dcost = float(-b_orig @ y_u)
        gap_rel = abs(pcost - dcost) / (1.0 + max(abs(pcost), abs(dcost)))
        best = (x_u, y_u, s_u, pcost, dcost, gap_rel)

    x_u, y_u, s_u, pcost, dcost, gap_rel = best

    # map duals/slacks back: undo rotation, undo permutation
    y_out = y_u.copy()
    s_out = s_u.copy()
    if rot is not None and np.all(np.isfinite(y_out)):
        seg = slice(layout.n_eq + layout.n_nn, m)
        y_out[seg] = rot.T @ y_out[seg]
        s_out[seg] = rot.T @ s_out[seg]
    inv = np.empty(m, dtype=np.int64)
    inv[perm] = np.arange(m)
    y_final = y_out[inv]
    s_final = s_out[inv]

    const = program.objective_constant
    return SolveResult(
        status=status,
        primal=x_u,
        slack=s_final,
        dual=y_final,
        primal_objective=pcost + const if np.isfinite(pcost) else pcost,
        dual_objective=dcost + const if np.isfinite(dcost) else dcost,
        gap=gap_rel,
        iterations=iters_done + 1,
        info={"time": time.perf_counter() - t0, "solver": "hsd-nt-mehrotra"},
    )


def _iterate_step(settings, scaling, s, z, x, y_eq, tau, kappa, deg,
                  a_eq, a_con, a_eq_t, a_con_t, at_s, b_eq, b_con, b_s, c_s,
                  n, ne, eye_n, eye_e, delta):
    """One Mehrotra predictor-corrector step of the homogeneous embedding."""
    scaling.update(s, z)
    lam = scaling.lam
    mu = (float(s @ z) + tau * kappa) / (deg + 1)

    d_diag, ucols = scaling.w2inv_parts()
    da = a_con.multiply(d_diag[:, None]).tocsc()
    h = (a_con_t @ da).tocsc()
    if ucols is not None:
        v_lr = (a_con_t @ ucols).tocsc()
        h = (h + v_lr @ v_lr.T).tocsc()

    lu = None
    delta_try = delta
    for _ in range(6):  # dynamic regularization bumps on tiny/zero pivots
        if ne:
            kkt = sp.bmat(
                [[h + delta_try * eye_n, a_eq_t], [a_eq, -delta_try * eye_e]],
                format="csc",
            )
        else:
            kkt = (h + delta_try * eye_n).tocsc()
        try:
            lu = spla.splu(
                kkt,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
            break
        except RuntimeError:
            delta_try *= 100.0
    if lu is None:
        raise FloatingPointError("KKT factorization failed at all regularization levels")

    def reduced_solve(r1, r2, r3):
        rhs_top = r1 + a_con_t @ scaling.w2inv(r3)
        rhs = np.concatenate([rhs_top, r2]) if ne else rhs_top
        sol = lu.solve(rhs)
        dx = sol[:n]
        dy_eq = sol[n:] if ne else np.zeros(0)
        dz = scaling.w2inv(a_con @ dx - r3)
        return dx, dy_eq, dz

    def kkt_solve(r1, r2, r3):
        """Solve the bordered system with refinement against the full system.

        Rows: A_E'dy + A_C'dz = r1;  A_E dx = r2;  A_C dx - W^2 dz = r3.
        Refining the unreduced system repairs both regularization error and
        the cancellation introduced by eliminating dz through W^{-2}.
        """
        dx, dy_eq, dz = reduced_solve(r1, r2, r3)
        scale = 1.0 + max(
            np.max(np.abs(r1), initial=0.0),
            np.max(np.abs(r2), initial=0.0),
            np.max(np.abs(r3), initial=0.0),
        )
        for _ in range(settings.refine_steps):
            res1 = r1 - (a_con_t @ dz) - (a_eq_t @ dy_eq if ne else 0.0)
            res2 = r2 - a_eq @ dx if ne else np.zeros(0)
            res3 = r3 - (a_con @ dx) + scaling.w2(dz)
            err = max(
                np.max(np.abs(res1), initial=0.0),
                np.max(np.abs(res2), initial=0.0),
                np.max(np.abs(res3), initial=0.0),
            )
            if err <= 1e-14 * scale:
                break
            cx, ce, cz = reduced_solve(res1, res2, res3)
            dx = dx + cx
            dy_eq = dy_eq + ce
            dz = dz + cz
        return dx, dy_eq, dz

    # residuals of the embedding (scaled space)
    y_full = np.concatenate([y_eq, z])
    rd = at_s @ y_full + c_s * tau
    rp_eq = a_eq @ x - b_eq * tau if ne else np.zeros(0)
    rp_con = a_con @ x + s - b_con * tau
    rg = kappa + float(c_s @ x) + float(b_s @ y_full)

    du_x, du_ye, du_z = kkt_solve(-c_s, b_eq, b_con)

    def direction(sig, d_lam, d_taukappa):
        r1 = -(1.0 - sig) * rd
        r2 = -(1.0 - sig) * rp_eq
        dtil = scaling.jdiv(lam, d_lam)
        r3 = -(1.0 - sig) * rp_con - scaling.w(dtil)
        dv_x, dv_ye, dv_z = kkt_solve(r1, r2, r3)
        denom = float(c_s @ du_x) + float(b_eq @ du_ye) + float(b_con @ du_z) - kappa / tau
        numer = (
            -(1.0 - sig) * rg
            - d_taukappa / tau
            - float(c_s @ dv_x)
            - float(b_eq @ dv_ye)
            - float(b_con @ dv_z)
        )
        dtau = numer / denom
        dx = dv_x + dtau * du_x
        dy_e = dv_ye + dtau * du_ye
        dz = dv_z + dtau * du_z
        ds = scaling.w(dtil - scaling.w(dz))
        dkappa = (d_taukappa - kappa * dtau) / tau
        return dx, dy_e, dz, ds, dtau, dkappa

    lam2 = scaling.jprod(lam, lam)

    # predictor
    dx_a, dye_a, dz_a, ds_a, dtau_a, dkap_a = direction(0.0, -lam2, -tau * kappa)
    alpha_a = _max_step(scaling, s, ds_a, z, dz_a, tau, dtau_a, kappa, dkap_a)
    mu_aff = (
        float((s + alpha_a * ds_a) @ (z + alpha_a * dz_a))
        + (tau + alpha_a * dtau_a) * (kappa + alpha_a * dkap_a)
    ) / (deg + 1)
    sigma = min(max((mu_aff / mu) ** 3, 1e-8), 0.9999)

    # corrector
    corr = scaling.jprod(scaling.winv(ds_a), scaling.w(dz_a))
    d_lam = sigma * mu * scaling.identity() - lam2 - corr
    d_tk = sigma * mu - tau * kappa - dtau_a * dkap_a
    dx_c, dye_c, dz_c, ds_c, dtau_c, dkap_c = direction(sigma, d_lam, d_tk)
    alpha = _max_step(scaling, s, ds_c, z, dz_c, tau, dtau_c, kappa, dkap_c)
    alpha = min(1.0, settings.step_fraction * alpha)
    if settings.verbose:
        print(f"         alpha_aff {alpha_a:8.2e} sigma {sigma:8.2e} alpha {alpha:8.2e}")
    if not np.isfinite(alpha) or alpha <= 1e-10:
        raise FloatingPointError("step length collapsed")

    x = x + alpha * dx_c
    y_eq = y_eq + alpha * dye_c
    z = z + alpha * dz_c
    s = s + alpha * ds_c
    tau = tau + alpha * dtau_c
    kappa = kappa + alpha * dkap_c
    if not np.isfinite(tau) or tau <= 0:
        raise FloatingPointError("tau left the positive ray")
    return x, y_eq, z, s, tau, kappa



def _max_step(scaling, s, ds, z, dz, tau, dtau, kappa, dkappa):
    alpha = min(scaling.step_to_boundary(s, ds), scaling.step_to_boundary(z, dz))
    if dtau < 0:
        alpha = min(alpha, -tau / dtau)
    if dkappa < 0:
        alpha = min(alpha, -kappa / dkappa)
    return alpha


def residuals(program: ConicProgram, result: SolveResult) -> dict:
    """Primal/dual residual inf-norms and the relative objective gap."""
    x, y, s = result.primal, result.dual, result.slack
    if x.shape[0] != program.num_vars or y.shape[0] != program.num_rows:
        raise ValueError("result dimensions do not match the program")
    a = program.constraint_matrix
    primal_res = float(np.max(np.abs(a @ x + s - program.constraint_offset), initial=0.0))
    dual_res = float(np.max(np.abs(a.T @ y + program.objective), initial=0.0))
    cx = float(program.objective @ x)
    by = float(program.constraint_offset @ y)
    gap = abs(cx + by) / (1.0 + abs(cx))
    return {"primal_res": primal_res, "dual_res": dual_res, "gap": gap}
