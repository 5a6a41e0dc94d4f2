"""Structural dualization, Phase-I feasibility probing, duality reports.

The dual of ``min c'x s.t. Ax + s = b, s in K`` is built as a first-class
program over the dual multipliers y: ``min b'y s.t. A'y = -c, y_k in K_k``
for every nontrivial cone block (zero-cone multipliers stay free). All
nontrivial cones here are self-dual, so the dual program uses the same cone
kinds. Note the standard-form dual minimizes b'y, whose optimal value is the
negative of the primal optimum.

The Phase-I probe solves the slack-augmented market program with a pure
slack objective (slacks capped below), so a strictly positive optimal slack
soundly certifies infeasibility and all-negative slacks certify essentially
strict feasibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .cones import Cone, ConeKind, ConicProgram, SolveStatus
from .solver import SolverSettings, solve


@dataclass
class DualReport:
    primal_obj: float
    dual_obj: float
    relative_gap: float
    essentially_strictly_feasible: bool = False
    min_soc_margin: float = np.nan
    phase1_slacks: dict[str, dict[str, float]] = field(default_factory=dict)
    infeasible: bool = False
    mild_conditions: dict[str, bool] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "primal_obj": _jsonable(self.primal_obj),
            "dual_obj": _jsonable(self.dual_obj),
            "relative_gap": _jsonable(self.relative_gap),
            "essentially_strictly_feasible": self.essentially_strictly_feasible,
            "min_soc_margin": _jsonable(self.min_soc_margin),
            "phase1_slacks": self.phase1_slacks,
            "infeasible": self.infeasible,
            "mild_conditions": self.mild_conditions,
        }


def _jsonable(v):
    return None if v is None or not np.isfinite(v) else float(v)


def dualize(program: ConicProgram) -> ConicProgram:
    """Lagrangian dual in the same standard form, with a row/column name map.

    Variables of the dual are the multipliers y (one per primal row). Rows:
    n zero-cone rows A'y + c = 0, then one self-dual cone block per
    nontrivial primal cone constraining the corresponding y block.
    """
    a = program.constraint_matrix
    m, n = a.shape
    var_names = (
        [f"y[{program.row_names[i]}]" if program.row_names else f"y{i}" for i in range(m)]
        if True else None
    )
    blocks = [a.T]
    offsets = [-program.objective]
    cones: list[Cone] = [Cone(ConeKind.ZERO, 1) for _ in range(n)]
    row_names = [
        f"stat[{program.var_names[j]}]" if program.var_names else f"stat{j}"
        for j in range(n)
    ]
    start = 0
    sel_rows, sel_cols = [], []
    for cone in program.cones:
        if cone.kind is not ConeKind.ZERO:
            sel_rows.extend(range(len(sel_rows), len(sel_rows) + cone.dim))
            sel_cols.extend(range(start, start + cone.dim))
            cones.append(Cone(cone.kind, cone.dim))
            row_names.extend(f"cone[y{start + i}]" for i in range(cone.dim))
        start += cone.dim
    if sel_cols:
        sel = sp.csr_matrix(
            (np.ones(len(sel_cols)), (np.arange(len(sel_cols)), sel_cols)),
            shape=(len(sel_cols), m),
        )
        blocks.append(-sel)
        offsets.append(np.zeros(len(sel_cols)))
    return ConicProgram(
        num_vars=m,
        objective=program.constraint_offset.copy(),
        constraint_matrix=sp.vstack(blocks).tocsc(),
        constraint_offset=np.concatenate(offsets),
        cones=cones,
        var_names=var_names,
        row_names=row_names,
    )


def verify_strong_duality(program: ConicProgram, settings: SolverSettings | None = None) -> DualReport:
    """Solve the program and its structural dual; report objectives and gap."""
    res_p = solve(program, settings)
    res_d = solve(dualize(program), settings)
    primal = res_p.primal_objective
    # standard-form dual minimizes b'y = -(primal optimum)
    dual = -res_d.primal_objective if np.isfinite(res_d.primal_objective) else np.nan
    gap = abs(primal - dual) / (1.0 + abs(primal)) if np.isfinite(primal) and np.isfinite(dual) else np.nan
    return DualReport(primal_obj=primal, dual_obj=dual, relative_gap=gap)


def phase1_probe(
    program: ConicProgram,
    participant_blocks: dict[str, dict[str, list[int]]],
    settings: SolverSettings | None = None,
    strict_threshold: float = 1e-7,
    mild_conditions: dict[str, bool] | None = None,
) -> DualReport:
    """Essentially-strict-feasibility probe via per-participant slack variables.

    ``participant_blocks`` maps name -> {"soc": [cone indices], "rotated":
    [cone indices]}; each participant gets one slack added to its SOC heads
    and one to its epigraph heads. Pure slack objective with slacks >= -1;
    all optimal slacks < -threshold certifies an essentially strictly
    feasible point, any slack > +threshold certifies infeasibility.
    """
    a = program.constraint_matrix.tocoo()
    m, n = a.shape
    names = sorted(participant_blocks)
    n_slacks = 2 * len(names)
    col_of = {}
    for k, name in enumerate(names):
        col_of[(name, "soc")] = n + 2 * k
        col_of[(name, "rotated")] = n + 2 * k + 1

    cone_slices = program.cone_slices()
    rows = list(a.row)
    cols = list(a.col)
    vals = list(a.data)
    for name in names:
        for tag in ("soc", "rotated"):
            for cone_idx in participant_blocks[name].get(tag, []):
                head = cone_slices[cone_idx].start
                rows.append(head)
                cols.append(col_of[(name, tag)])
                vals.append(-1.0)  # s_head = ... + slack
    extra_rows = []
    extra_cones = []
    roff = m
    for name in names:
        for tag in ("soc", "rotated"):
            rows.append(roff)
            cols.append(col_of[(name, tag)])
            vals.append(-1.0)
            extra_rows.append(1.0)  # slack + 1 >= 0
            extra_cones.append(Cone(ConeKind.NONNEGATIVE, 1))
            roff += 1

    cost = np.zeros(n + n_slacks)
    cost[n:] = 1.0
    aug = ConicProgram(
        num_vars=n + n_slacks,
        objective=cost,
        constraint_matrix=sp.coo_matrix((vals, (rows, cols)), shape=(roff, n + n_slacks)),
        constraint_offset=np.concatenate([program.constraint_offset, extra_rows]),
        cones=list(program.cones) + extra_cones,
    )
    res = solve(aug, settings)
    report = DualReport(
        primal_obj=res.primal_objective,
        dual_obj=res.dual_objective,
        relative_gap=res.gap,
        mild_conditions=dict(mild_conditions or {}),
    )
    if res.status is SolveStatus.PRIMAL_INFEASIBLE:
        report.infeasible = True
        return report
    if res.status is not SolveStatus.OPTIMAL:
        raise RuntimeError(f"phase-1 probe did not solve: {res.status}")
    slacks = {}
    worst = -np.inf
    for name in names:
        sv = float(res.primal[col_of[(name, "soc")]])
        rv = float(res.primal[col_of[(name, "rotated")]])
        slacks[name] = {"soc": sv, "rotated": rv}
        worst = max(worst, sv, rv)
    report.phase1_slacks = slacks
    report.infeasible = worst > strict_threshold
    report.essentially_strictly_feasible = worst < -strict_threshold
    report.min_soc_margin = _min_soc_margin(program, res.primal[:n])
    return report


def _min_soc_margin(program: ConicProgram, x: np.ndarray) -> float:
    """Smallest cone-inequality slack of the point x over SOC/rotated rows."""
    s = program.slack(x)
    worst = np.inf
    for cone, sl in zip(program.cones, program.cone_slices()):
        blk = s[sl]
        if cone.kind is ConeKind.SECOND_ORDER:
            worst = min(worst, blk[0] - float(np.linalg.norm(blk[1:])))
        elif cone.kind is ConeKind.ROTATED_SECOND_ORDER:
            worst = min(worst, 2.0 * blk[0] * blk[1] - float(np.dot(blk[2:], blk[2:])))
    return float(worst)


def norm_bound_estimate(
    program: ConicProgram,
    participant_vars: dict[str, list[int]],
    settings: SolverSettings | None = None,
    tol: float = 1e-7,
    max_doublings: int = 20,
) -> dict[str, float]:
    """Non-binding Euclidean norm bounds per participant, by doubling.

    Adds ||x_block|| <= D per participant and doubles D until the optimal
    objective is unchanged (within tol, relative) across two consecutive
    iterations; compares objective values, not argmins.
    """
    base = solve(program, settings)
    if base.status is not SolveStatus.OPTIMAL:
        raise RuntimeError(f"instance must be solvable, got {base.status}")
    names = sorted(participant_vars)
    bound = {nm: 1.0 for nm in names}
    prev_obj, prev_bound = None, None
    for _ in range(max_doublings):
        prog_b = _with_norm_bounds(program, participant_vars, bound)
        res = solve(prog_b, settings)
        obj = res.primal_objective if res.status is SolveStatus.OPTIMAL else np.inf
        if prev_obj is not None and np.isfinite(obj) and np.isfinite(prev_obj):
            if abs(obj - prev_obj) <= tol * (1.0 + abs(obj)) and \
                    abs(obj - base.primal_objective) <= tol * (1.0 + abs(obj)):
                return dict(prev_bound)   # first bound of the unchanged pair
        prev_obj, prev_bound = obj, dict(bound)
        bound = {nm: 2.0 * d for nm, d in bound.items()}
    raise RuntimeError(f"no non-binding norm bound found after {max_doublings} doublings")


def _with_norm_bounds(program, participant_vars, bound):
    a = program.constraint_matrix.tocoo()
    rows = list(a.row)
    cols = list(a.col)
    vals = list(a.data)
    offs = list(program.constraint_offset)
    cones = list(program.cones)
    roff = program.num_rows
    for nm in sorted(participant_vars):
        idxs = participant_vars[nm]
        offs.append(bound[nm])       # head: D
        roff += 1
        for j in idxs:
            rows.append(roff)
            cols.append(j)
            vals.append(-1.0)        # tail: x_j
            offs.append(0.0)
            roff += 1
        cones.append(Cone(ConeKind.SECOND_ORDER, len(idxs) + 1))
    return ConicProgram(
        num_vars=program.num_vars,
        objective=program.objective,
        constraint_matrix=sp.coo_matrix((vals, (rows, cols)), shape=(roff, program.num_vars)),
        constraint_offset=np.array(offs),
        cones=cones,
        objective_constant=program.objective_constant,
    )


def market_phase1(prog, maps, settings: SolverSettings | None = None) -> DualReport:
    """Phase-I probe wired to a market assembly's index maps."""
    blocks: dict[str, dict[str, list[int]]] = {}
    mild: dict[str, bool] = {}
    for (name, j), cone_idx in maps.soc_cones.items():
        blocks.setdefault(name, {"soc": [], "rotated": []})["soc"].append(cone_idx)
    for (name, t), cone_idx in maps.epigraph_cones.items():
        blocks.setdefault(name, {"soc": [], "rotated": []})["rotated"].append(cone_idx)
    for name, bid in maps.bids.items():
        ok = bool(np.any(bid.cost_quadratic > 0))
        for c in bid.soc_constraints:
            if c.e <= float(np.linalg.norm(c.b)) + 1e-12 and c.m > 0:
                ok = False
        mild[name] = ok
    return phase1_probe(prog, blocks, settings, mild_conditions=mild)


def market_duality_report(prog, maps, settings: SolverSettings | None = None) -> DualReport:
    """Strong duality check plus Phase-I feasibility fields for one assembly."""
    rep = verify_strong_duality(prog, settings)
    p1 = market_phase1(prog, maps, settings)
    rep.essentially_strictly_feasible = p1.essentially_strictly_feasible
    rep.min_soc_margin = p1.min_soc_margin
    rep.phase1_slacks = p1.phase1_slacks
    rep.infeasible = p1.infeasible
    rep.mild_conditions = p1.mild_conditions
    return rep
