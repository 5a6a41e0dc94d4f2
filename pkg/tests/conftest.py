"""Shared helpers: small-program constructors and independent oracles.

Oracles here are deliberately naive (vertex enumeration, projected
subgradient, angle-based DC power flow) and never call the library code
paths they are used to check.
"""

import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from conic_market.cones import Cone, ConeKind, ConicProgram


def lp_program(c, a_ub, b_ub, a_eq=None, b_eq=None, names=None):
    """min c'x  s.t.  a_ub x <= b_ub,  a_eq x = b_eq (inequations as nonneg cones)."""
    c = np.asarray(c, float)
    a_ub = np.atleast_2d(np.asarray(a_ub, float))
    b_ub = np.atleast_1d(np.asarray(b_ub, float))
    blocks, offsets, cones = [], [], []
    if a_eq is not None:
        a_eq = np.atleast_2d(np.asarray(a_eq, float))
        b_eq = np.atleast_1d(np.asarray(b_eq, float))
        blocks.append(a_eq)
        offsets.append(b_eq)
        cones += [Cone(ConeKind.ZERO, 1)] * a_eq.shape[0]
    blocks.append(a_ub)
    offsets.append(b_ub)
    cones += [Cone(ConeKind.NONNEGATIVE, 1)] * a_ub.shape[0]
    return ConicProgram(
        num_vars=len(c),
        objective=c,
        constraint_matrix=sp.csc_matrix(np.vstack(blocks)),
        constraint_offset=np.concatenate(offsets),
        cones=cones,
        var_names=names,
    )


def lp_vertex_oracle(c, a_ub, b_ub, a_eq=None, b_eq=None, tol=1e-9):
    """Brute-force optimum of a bounded LP by enumerating basic solutions."""
    c = np.asarray(c, float)
    n = len(c)
    rows = [(np.asarray(r, float), float(v), "ub") for r, v in zip(np.atleast_2d(a_ub), np.atleast_1d(b_ub))]
    if a_eq is not None:
        rows += [(np.asarray(r, float), float(v), "eq") for r, v in zip(np.atleast_2d(a_eq), np.atleast_1d(b_eq))]
    best, best_x = np.inf, None
    for combo in itertools.combinations(range(len(rows)), n):
        a = np.array([rows[i][0] for i in combo])
        b = np.array([rows[i][1] for i in combo])
        if abs(np.linalg.det(a)) < 1e-12:
            continue
        x = np.linalg.solve(a, b)
        feas = all(
            (r @ x <= v + tol) if kind == "ub" else (abs(r @ x - v) <= tol)
            for r, v, kind in rows
        )
        if feas and c @ x < best:
            best, best_x = float(c @ x), x
    return best, best_x


def socp_subgradient_oracle(c, soc_rows, x0, iters=200000, seed=0):
    """Projected-subgradient minimizer for min c'x s.t. ||A_j x + b_j|| <= d_j'x + e_j.

    soc_rows: list of (A, b, d, e). Returns an approximate optimal value.
    Slow but entirely independent of the interior-point path.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x0, float).copy()
    best = np.inf
    c = np.asarray(c, float)
    for k in range(iters):
        viol, g = 0.0, None
        for a, b, d, e in soc_rows:
            val = np.linalg.norm(a @ x + b) - (d @ x + e)
            if val > viol + 1e-12:
                viol = val
                r = a @ x + b
                nr = np.linalg.norm(r)
                g = (a.T @ r / nr if nr > 1e-14 else a.T @ rng.standard_normal(len(b))) - d
        step = 0.5 / np.sqrt(k + 1.0)
        if viol > 1e-10:
            x = x - step * viol * g / max(np.dot(g, g), 1e-14)
        else:
            best = min(best, float(c @ x))
            x = x - step * c / max(np.linalg.norm(c), 1e-14)
    return best


def random_feasible_socp(rng, n, cone_dims, density=0.5):
    """Random strictly feasible primal-dual SOCP with known interior point.

    Construction: draw interior s*, z* for each cone, random A; set
    b = A x* + s*, c = -A' z*. Then (x*, s*) is strictly primal feasible and
    z* strictly dual feasible, so strong duality holds.
    """
    m = sum(cone_dims)
    a = sp.random(m, n, density=density, random_state=np.random.RandomState(rng.integers(2**31 - 1)), format="csc")
    a = a + sp.random(m, n, density=0.05, random_state=np.random.RandomState(rng.integers(2**31 - 1)), format="csc")
    x_star = rng.standard_normal(n)
    s_parts, z_parts, cones = [], [], []
    for d in cone_dims:
        if d == 1:
            s_parts.append(rng.uniform(0.5, 2.0, 1))
            z_parts.append(rng.uniform(0.5, 2.0, 1))
            cones.append(Cone(ConeKind.NONNEGATIVE, 1))
        else:
            w = rng.standard_normal(d - 1)
            s_parts.append(np.concatenate([[np.linalg.norm(w) + rng.uniform(0.5, 2.0)], w]))
            w2 = rng.standard_normal(d - 1)
            z_parts.append(np.concatenate([[np.linalg.norm(w2) + rng.uniform(0.5, 2.0)], w2]))
            cones.append(Cone(ConeKind.SECOND_ORDER, d))
    s_star = np.concatenate(s_parts)
    z_star = np.concatenate(z_parts)
    b = a @ x_star + s_star
    c = -(a.T @ z_star)
    prog = ConicProgram(
        num_vars=n, objective=c, constraint_matrix=a, constraint_offset=b, cones=cones
    )
    return prog, x_star, s_star, z_star


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
