"""Market-clearing assembly, solving, price extraction and payments.

Builds the conic market program from bids (deterministic design) or from
participant specs plus an uncertainty model (chance-constrained design),
solves it with the embedded solver, and unpacks dual variables into nodal
commodity prices Pi_p = Lambda_p - Psi'(rho_up - rho_dn), payments and
congestion rent.

Commodities are zero-indexed: 0 = energy, 1 = flexibility in the shipped
two-commodity instances; the assembler itself is generic in P.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .bids import (
    ConicBid,
    Coupling,
    CouplingKind,
    ParticipantKind,
    ParticipantSpec,
    build_participant_bid,
    count_chance_inequalities,
)
from .cones import ConeKind, ConicProgram, ProgramBuilder, SolveResult, SolveStatus
from .network import Network
from .solver import SolverSettings, solve
from .uncertainty import UncertaintyModel, bonferroni_split, cholesky_block, safety_factor


@dataclass
class MarketInstance:
    network: Network
    horizon: int
    num_commodities: int = 2
    label: str = ""
    participants: list[ParticipantSpec] | None = None
    uncertainty: UncertaintyModel | None = None
    bids: list[ConicBid] | None = None

    def __post_init__(self):
        if self.bids is None and self.participants is None:
            raise ValueError("instance needs bids or participant specs")
        entries = self.bids if self.bids is not None else self.participants
        if len(entries) < 2:
            raise ValueError("a market needs at least two participants")
        for b in entries:
            if b.node not in self.network.nodes:
                raise ValueError(f"{b.name}: node {b.node!r} not in network")
        if self.num_commodities < 1:
            raise ValueError("need at least one commodity")

    def wind_sources(self) -> list[ParticipantSpec]:
        return [s for s in (self.participants or []) if s.kind == ParticipantKind.WIND]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.label.encode())
        h.update(np.asarray(self.network.ptdf).tobytes())
        h.update(np.asarray(self.network.capacities).tobytes())
        for b in self.participants or []:
            h.update(b.name.encode())
            h.update(str((b.kind, b.node, b.q_max, b.cost_linear)).encode())
        if self.uncertainty is not None:
            h.update(self.uncertainty.covariance.tobytes())
        return h.hexdigest()[:16]


@dataclass
class AssemblyMaps:
    """Index maps linking program rows/columns to market quantities."""

    var_slices: dict[str, slice]
    z_slices: dict[str, slice]
    slots_per_hour: dict[str, int]
    epigraph_cones: dict[tuple[str, int], int]          # (name, t) -> cone index
    soc_cones: dict[tuple[str, int], int]               # (name, j) -> cone index
    eq_rows: dict[str, slice]
    balance_rows: dict[tuple[int, int], int]            # (commodity, t) -> row
    flow_rows: dict[tuple[int, int, str], int]          # (line, t, dir) -> row (M^c)
    flow_cones: dict[tuple[int, int, str], int]         # (line, t, dir) -> cone (M^cc)
    cone_rows: list[slice] = field(default_factory=list)
    bids: dict[str, ConicBid] = field(default_factory=dict)
    policy_names: list[str] = field(default_factory=list)

    def head_row(self, cone_index: int) -> int:
        return self.cone_rows[cone_index].start


def _nominal_injection_cols(bid: ConicBid, horizon: int):
    """Per hour, (cols, coeffs) of this bid's net nodal injection over linear couplings."""
    out = [([], []) for _ in range(horizon)]
    for p, coup in bid.coupling.items():
        if coup.kind != CouplingKind.LINEAR:
            continue
        g = coup.linear_matrix(horizon)
        for t in range(horizon):
            nz = np.flatnonzero(g[t])
            for tp in nz:
                out[t][0].append(bid.col(int(tp), coup.slot))
                out[t][1].append(float(g[t, tp]))
    return out


def assemble_mc(
    instance: MarketInstance,
    bids: list[ConicBid] | None = None,
    include_network_chance: bool = False,
    r_network: float | None = None,
    fix_policies_to_zero: bool = False,
) -> tuple[ConicProgram, AssemblyMaps]:
    """Assemble the conic market program from bids.

    Row layout: cost epigraphs per (participant, hour); participant SOC
    blocks; participant equalities; per-commodity balance rows; line flow
    limits (deterministic rows, or both-direction chance cones when
    ``include_network_chance``).
    """
    t_hor = instance.horizon
    net = instance.network
    if bids is None:
        bids = instance.bids
    if bids is None:
        raise ValueError("no bids available; use assemble_mcc for spec-based instances")

    names = [b.name for b in bids]
    if len(set(names)) != len(names):
        raise ValueError("duplicate participant names")

    # variable layout: per participant [q (T*K)] then [z (T)]
    var_slices, z_slices, spk = {}, {}, {}
    ofs = 0
    var_names = []
    for b in bids:
        var_slices[b.name] = slice(ofs, ofs + b.num_vars)
        for t in range(t_hor):
            for k in range(b.slots_per_hour):
                var_names.append(f"{b.name}:q:t{t}:k{k}")
        ofs += b.num_vars
        z_slices[b.name] = slice(ofs, ofs + t_hor)
        var_names.extend(f"{b.name}:z:t{t}" for t in range(t_hor))
        ofs += t_hor
        spk[b.name] = b.slots_per_hour
    n = ofs

    pb = ProgramBuilder(n, var_names)
    cost = np.zeros(n)
    cost_const = 0.0
    epi_cones: dict[tuple[str, int], int] = {}
    soc_cones: dict[tuple[str, int], int] = {}
    eq_rows: dict[str, slice] = {}
    balance_rows: dict[tuple[int, int], int] = {}
    flow_rows: dict[tuple[int, int, str], int] = {}
    flow_cones: dict[tuple[int, int, str], int] = {}

    for b in bids:
        base = var_slices[b.name].start
        zbase = z_slices[b.name].start
        cost[zbase: zbase + t_hor] = 1.0
        cost[base: base + b.num_vars] = b.cost_linear.reshape(-1)
        cost_const += b.cost_constant

    # (7b) rotated cost epigraphs per (i, t)
    for b in bids:
        base = var_slices[b.name].start
        zbase = z_slices[b.name].start
        for t in range(t_hor):
            cq = b.cost_quadratic[t]
            nz = np.flatnonzero(cq > 0)
            if nz.size == 0:
                pb.add_nonneg_row([zbase + t], [-1.0], 0.0, f"{b.name}:z_nonneg:t{t}")
                continue
            pb.add_row([zbase + t], [-1.0], 0.0, f"{b.name}:epi_u:t{t}")
            pb.add_row([], [], 0.5, f"{b.name}:epi_v:t{t}")
            for k in nz:
                pb.add_row([base + b.col(t, int(k))], [-np.sqrt(cq[k])], 0.0,
                           f"{b.name}:epi_w:t{t}:k{k}")
            epi_cones[(b.name, t)] = pb.add_cone(ConeKind.ROTATED_SECOND_ORDER, 2 + nz.size)

    # (7c) participant SOC blocks
    for b in bids:
        base = var_slices[b.name].start
        for j, con in enumerate(b.soc_constraints):
            d_cols = np.flatnonzero(con.d)
            if con.m == 0 and not con.rotated:
                r = pb.add_row(base + d_cols, -con.d[d_cols], con.e, con.label or f"{b.name}:soc{j}")
                soc_cones[(b.name, j)] = pb.add_cone(ConeKind.NONNEGATIVE, 1)
                continue
            pb.add_row(base + d_cols, -con.d[d_cols], con.e, con.label or f"{b.name}:soc{j}:head")
            if con.rotated:
                pb.add_row([], [], 0.5, f"{b.name}:soc{j}:half")
            acsr = con.a.tocsr()
            for i in range(con.m):
                cols = acsr.indices[acsr.indptr[i]: acsr.indptr[i + 1]]
                vals = acsr.data[acsr.indptr[i]: acsr.indptr[i + 1]]
                pb.add_row(base + cols, -vals, con.b[i], f"{b.name}:soc{j}:r{i}")
            kind = ConeKind.ROTATED_SECOND_ORDER if con.rotated else ConeKind.SECOND_ORDER
            dim = con.m + (2 if con.rotated else 1)
            soc_cones[(b.name, j)] = pb.add_cone(kind, dim)

    # (7d) participant equalities
    for b in bids:
        base = var_slices[b.name].start
        start = pb.num_rows
        if b.num_eq():
            eq = b.eq_matrix.tocsr()
            for i in range(eq.shape[0]):
                cols = eq.indices[eq.indptr[i]: eq.indptr[i + 1]]
                vals = eq.data[eq.indptr[i]: eq.indptr[i + 1]]
                pb.add_zero_row(base + cols, vals, b.eq_rhs[i], f"{b.name}:eq{i}")
        if fix_policies_to_zero:
            for p, coup in b.coupling.items():
                if coup.kind == CouplingKind.RECOURSE_POLICY:
                    for t in range(t_hor):
                        pb.add_zero_row([base + b.col(t, coup.slot)], [1.0], 0.0,
                                        f"{b.name}:policy_zero:t{t}")
        eq_rows[b.name] = slice(start, pb.num_rows)

    # (7e) per-commodity balance rows
    policy_names = []
    for p in range(instance.num_commodities):
        kinds = {b.coupling[p].kind for b in bids if p in b.coupling}
        if CouplingKind.RECOURSE_POLICY in kinds and not fix_policies_to_zero:
            for t in range(t_hor):
                cols, vals = [], []
                for b in bids:
                    coup = b.coupling.get(p)
                    if coup is not None and coup.kind == CouplingKind.RECOURSE_POLICY:
                        cols.append(var_slices[b.name].start + b.col(t, coup.slot))
                        vals.append(1.0)
                        if t == 0:
                            policy_names.append(b.name)
                r, _ = pb.add_zero_row(cols, vals, 1.0, f"balance:p{p}:t{t}")
                balance_rows[(p, t)] = r
        elif CouplingKind.LINEAR in kinds:
            per_bid = {
                b.name: _nominal_injection_cols(b, t_hor)
                for b in bids
                if b.coupling.get(p) is not None and b.coupling[p].kind == CouplingKind.LINEAR
            }
            for t in range(t_hor):
                cols, vals = [], []
                for b in bids:
                    if b.name not in per_bid:
                        continue
                    cc, vv = per_bid[b.name][t]
                    cols.extend(var_slices[b.name].start + np.asarray(cc, dtype=int))
                    vals.extend(vv)
                r, _ = pb.add_zero_row(cols, vals, 0.0, f"balance:p{p}:t{t}")
                balance_rows[(p, t)] = r

    # (7f) line-flow limits on nominal injections, or network chance cones
    node_idx = {nm: k for k, nm in enumerate(net.nodes)}
    ptdf = net.ptdf
    caps = net.capacities
    inj_cols = {b.name: _nominal_injection_cols(b, t_hor) for b in bids
                if any(c.kind == CouplingKind.LINEAR for c in b.coupling.values())}

    uncertainty = instance.uncertainty
    w = uncertainty.num_sources if uncertainty is not None else 0
    if include_network_chance and (uncertainty is None or r_network is None):
        raise ValueError("network chance rows need an uncertainty model and safety factor")

    # per hour: columns and PTDF-weighted values of the nominal flow row
    for t in range(t_hor):
        cols_t, node_t = [], []
        for b in bids:
            if b.name not in inj_cols:
                continue
            cc, vv = inj_cols[b.name][t]
            for c, v in zip(cc, vv):
                cols_t.append((var_slices[b.name].start + c, v, node_idx[b.node]))
        if include_network_chance:
            x_t = (cholesky_block(uncertainty.covariance, [t], w)
                   if r_network != 0.0 else np.zeros((w, w)))
            tail_cols, tail_mat, tail_const = _network_tail(
                instance, bids, var_slices, t, node_idx, ptdf, x_t, r_network, w
            )
        for ell in range(net.num_lines):
            coeffs = [(c, v * ptdf[ell, nd]) for (c, v, nd) in cols_t]
            cols = [c for c, _ in coeffs]
            vals = [v for _, v in coeffs]
            if not include_network_chance:
                r = pb.add_row(cols, vals, caps[ell], f"flow_up:l{ell}:t{t}")
                pb.add_cone(ConeKind.NONNEGATIVE, 1)
                flow_rows[(ell, t, "+")] = r
                r = pb.add_row(cols, [-v for v in vals], caps[ell], f"flow_dn:l{ell}:t{t}")
                pb.add_cone(ConeKind.NONNEGATIVE, 1)
                flow_rows[(ell, t, "-")] = r
            else:
                for dsign, tag in ((1.0, "+"), (-1.0, "-")):
                    pb.add_row(cols, [dsign * v for v in vals], caps[ell],
                               f"flow_cc_{tag}:l{ell}:t{t}")
                    arow = tail_mat[ell]
                    for i in range(w):
                        pb.add_row(tail_cols, -arow[i], tail_const[ell][i],
                                   f"flow_cc_{tag}:l{ell}:t{t}:w{i}")
                    flow_cones[(ell, t, tag)] = pb.add_cone(ConeKind.SECOND_ORDER, w + 1)

    prog = pb.build(cost, cost_const)
    maps = AssemblyMaps(
        var_slices=var_slices,
        z_slices=z_slices,
        slots_per_hour=spk,
        epigraph_cones=epi_cones,
        soc_cones=soc_cones,
        eq_rows=eq_rows,
        balance_rows=balance_rows,
        flow_rows=flow_rows,
        flow_cones=flow_cones,
        cone_rows=prog.cone_slices(),
        bids={b.name: b for b in bids},
        policy_names=policy_names,
    )
    return prog, maps


def _network_tail(instance, bids, var_slices, t, node_idx, ptdf, x_t, r_net, w):
    """Chance tails of the flow rows: X_t' applied to the per-line mixing row.

    The mixing row over error coordinates combines policy responses (policy
    value at the provider's node per unit total error) minus the per-farm
    error at wind nodes. Returns (columns, per-line W x ncols matrices,
    per-line constant tails).
    """
    cols = []
    col_node = []
    for b in bids:
        coup = b.coupling.get(1)
        if coup is not None and coup.kind == CouplingKind.RECOURSE_POLICY:
            cols.append(var_slices[b.name].start + b.col(t, coup.slot))
            col_node.append(node_idx[b.node])
    ncols = len(cols)
    tails, consts = [], []
    for ell in range(ptdf.shape[0]):
        mix = np.zeros((w, ncols))
        for j, nd in enumerate(col_node):
            mix[:, j] = ptdf[ell, nd]          # alpha couples to every error coord
        const_vec = np.zeros(w)
        for b in bids:
            coup = b.coupling.get(1)
            if coup is not None and coup.kind == CouplingKind.UNCERTAINTY_SOURCE:
                const_vec[b.source_index] -= ptdf[ell, node_idx[b.node]]
        tails.append(r_net * (x_t.T @ mix))
        consts.append(r_net * (x_t.T @ const_vec))
    return np.asarray(cols, dtype=int), tails, consts


def assemble_mcc(
    specs: list[ParticipantSpec],
    network: Network,
    uncertainty: UncertaintyModel,
    horizon: int,
    label: str = "",
) -> tuple[ConicProgram, AssemblyMaps]:
    """Chance-constrained market program: bids from the EC-style participant
    models, Bonferroni-split safety factor, network chance rows both
    directions, nominal + recourse balances and the wind trace cost term."""
    n_ineq = count_chance_inequalities(specs, network.num_lines, horizon)
    eps_hat = float(bonferroni_split(uncertainty.epsilon, n_ineq)[0])
    zero_cov = bool(np.allclose(uncertainty.covariance, 0.0))
    r = safety_factor(eps_hat, uncertainty.safety_rule) if not zero_cov else 0.0
    winds = [s for s in specs if s.kind == ParticipantKind.WIND]
    src = {s.name: k for k, s in enumerate(winds)}
    if len(winds) != uncertainty.num_sources:
        raise ValueError(
            f"{len(winds)} wind producers but {uncertainty.num_sources} uncertainty sources"
        )
    bids = [
        build_participant_bid(s, uncertainty, r_factor=r, source_index=src.get(s.name))
        for s in specs
    ]
    instance = MarketInstance(
        network=network, horizon=horizon, num_commodities=2, label=label,
        participants=specs, uncertainty=uncertainty, bids=bids,
    )
    prog, maps = assemble_mc(
        instance, bids, include_network_chance=not zero_cov, r_network=r
    )
    return prog, maps


@dataclass
class MarketOutcome:
    status: SolveStatus
    label: str
    instance_digest: str
    design: str
    objective: float = np.nan
    allocations: dict[str, np.ndarray] = field(default_factory=dict)   # (T, K)
    epigraphs: dict[str, np.ndarray] = field(default_factory=dict)     # (T,)
    lambdas: np.ndarray | None = None        # P x T
    rho_up: np.ndarray | None = None         # L x T
    rho_dn: np.ndarray | None = None
    prices: np.ndarray | None = None         # P x N x T
    payments: dict[str, np.ndarray] = field(default_factory=dict)      # P-vector
    congestion_rent: float = 0.0
    solve_seconds: float = 0.0
    iterations: int = 0
    gap: float = np.nan
    dual_degenerate: bool = False
    result: SolveResult | None = None
    program: ConicProgram | None = None
    maps: AssemblyMaps | None = None
    nodes: list[str] | None = None

    def price(self, commodity: int, node_index: int, t: int) -> float:
        return float(self.prices[commodity, node_index, t])

    def policy(self, name: str) -> np.ndarray:
        bid = self.maps.bids[name]
        coup = bid.coupling.get(1)
        if coup is None or coup.kind != CouplingKind.RECOURSE_POLICY:
            return np.zeros(self.allocations[name].shape[0])
        return self.allocations[name][:, coup.slot]

    def dispatch(self, name: str) -> np.ndarray:
        """Nominal energy dispatch per hour."""
        bid = self.maps.bids[name]
        coup = bid.coupling.get(0)
        g = coup.linear_matrix(bid.horizon)
        return g @ self.allocations[name][:, coup.slot]

    def to_json_dict(self) -> dict:
        out = {
            "status": self.status.value,
            "label": self.label,
            "instance_digest": self.instance_digest,
            "design": self.design,
            "objective": None if not np.isfinite(self.objective) else self.objective,
            "congestion_rent": self.congestion_rent,
            "solve_seconds": self.solve_seconds,
            "iterations": self.iterations,
            "gap": None if not np.isfinite(self.gap) else self.gap,
            "dual_degenerate": self.dual_degenerate,
            "nodes": self.nodes,
        }
        if self.prices is not None:
            out["lambdas"] = self.lambdas.tolist()
            out["rho_up"] = self.rho_up.tolist()
            out["rho_dn"] = self.rho_dn.tolist()
            out["prices"] = self.prices.tolist()
            out["allocations"] = {k: v.tolist() for k, v in self.allocations.items()}
            out["epigraphs"] = {k: v.tolist() for k, v in self.epigraphs.items()}
            out["payments"] = {k: v.tolist() for k, v in self.payments.items()}
            out["primal"] = self.result.primal.tolist()
            out["dual"] = self.result.dual.tolist()
        return out


def clear(
    instance: MarketInstance,
    settings: SolverSettings | None = None,
    design: str = "mc",
    check_degenerate: bool = False,
    fix_policies_to_zero: bool = False,
) -> MarketOutcome:
    """Assemble, solve, and unpack an outcome with prices and payments."""
    t0 = time.perf_counter()
    if design == "mcc":
        if instance.participants is None or instance.uncertainty is None:
            raise ValueError("mcc design needs participant specs and an uncertainty model")
        prog, maps = assemble_mcc(
            instance.participants, instance.network, instance.uncertainty,
            instance.horizon, instance.label,
        )
    else:
        bids = instance.bids
        if bids is None:
            r = None
            bids = [
                build_participant_bid(s, instance.uncertainty, r_factor=r)
                for s in instance.participants
            ]
        prog, maps = assemble_mc(instance, bids, fix_policies_to_zero=fix_policies_to_zero)
    res = solve(prog, settings)
    outcome = extract_outcome(instance, prog, maps, res, design)
    outcome.solve_seconds = time.perf_counter() - t0
    if check_degenerate and outcome.status is SolveStatus.OPTIMAL:
        outcome.dual_degenerate = _degeneracy_probe(instance, prog, maps, res, settings, design)
    return outcome


def extract_outcome(instance, prog, maps, res, design="mc") -> MarketOutcome:
    net = instance.network
    t_hor = instance.horizon
    out = MarketOutcome(
        status=res.status,
        label=instance.label,
        instance_digest=instance.digest(),
        design=design,
        iterations=res.iterations,
        gap=res.gap,
        result=res,
        program=prog,
        maps=maps,
        nodes=list(net.nodes),
    )
    if res.status is not SolveStatus.OPTIMAL:
        return out
    out.objective = res.primal_objective
    x, y = res.primal, res.dual
    for name, sl in maps.var_slices.items():
        k = maps.slots_per_hour[name]
        out.allocations[name] = x[sl].reshape(t_hor, k)
        out.epigraphs[name] = x[maps.z_slices[name]]

    p_count = instance.num_commodities
    lambdas = np.zeros((p_count, t_hor))
    for (p, t), row in maps.balance_rows.items():
        lambdas[p, t] = -y[row]
    l_count = net.num_lines
    rho_up = np.zeros((l_count, t_hor))
    rho_dn = np.zeros((l_count, t_hor))
    for (ell, t, d), row in maps.flow_rows.items():
        (rho_up if d == "+" else rho_dn)[ell, t] = max(y[row], 0.0)
    for (ell, t, d), cone in maps.flow_cones.items():
        head = maps.head_row(cone)
        (rho_up if d == "+" else rho_dn)[ell, t] = max(y[head], 0.0)

    prices = np.zeros((p_count, net.num_nodes, t_hor))
    spread = net.ptdf.T @ (rho_up - rho_dn)   # N x T
    for p in range(p_count):
        prices[p] = lambdas[p][None, :] - spread
    out.lambdas = lambdas
    out.rho_up = rho_up
    out.rho_dn = rho_dn
    out.prices = prices

    node_idx = {nm: i for i, nm in enumerate(net.nodes)}
    for name, bid in maps.bids.items():
        pay = np.zeros(p_count)
        ni = node_idx[bid.node]
        for p, coup in bid.coupling.items():
            if coup.kind == CouplingKind.LINEAR:
                wq = coup.linear_matrix(t_hor) @ out.allocations[name][:, coup.slot]
            elif coup.kind == CouplingKind.RECOURSE_POLICY:
                wq = out.allocations[name][:, coup.slot]
            else:
                continue
            pay[p] = float(prices[p, ni, :] @ wq)
        out.payments[name] = pay
    out.congestion_rent = float(np.sum(net.capacities[:, None] * (rho_up + rho_dn)))
    return out


def _degeneracy_probe(instance, prog, maps, res, settings, design) -> bool:
    """Re-solve with reversed variable order; flag if any price moves > 1e-5."""
    n = prog.num_vars
    perm = np.arange(n)[::-1].copy()
    inv = np.empty(n, dtype=int)
    inv[perm] = np.arange(n)
    prog2 = ConicProgram(
        num_vars=n,
        objective=prog.objective[perm],
        constraint_matrix=prog.constraint_matrix[:, perm],
        constraint_offset=prog.constraint_offset,
        cones=prog.cones,
        objective_constant=prog.objective_constant,
    )
    res2 = solve(prog2, settings)
    if res2.status is not SolveStatus.OPTIMAL:
        return True
    out2 = extract_outcome(instance, prog, maps, _with_primal(res2, inv), design)
    return bool(np.max(np.abs(out2.prices - _prices_of(instance, prog, maps, res, design))) > 1e-5)


def _with_primal(res, inv):
    res2 = SolveResult(
        status=res.status, primal=res.primal[inv], slack=res.slack, dual=res.dual,
        primal_objective=res.primal_objective, dual_objective=res.dual_objective,
        gap=res.gap, iterations=res.iterations, info=res.info,
    )
    return res2


def _prices_of(instance, prog, maps, res, design):
    return extract_outcome(instance, prog, maps, res, design).prices


def clear_perfect_forecast(instance: MarketInstance, settings=None) -> MarketOutcome:
    """Deterministic twin: zero covariance, adjustment policies pinned to zero."""
    if instance.uncertainty is None or instance.participants is None:
        raise ValueError("needs a spec-based uncertain instance")
    u0 = UncertaintyModel(
        num_sources=instance.uncertainty.num_sources,
        horizon=instance.uncertainty.horizon,
        covariance=np.zeros_like(instance.uncertainty.covariance),
        epsilon=instance.uncertainty.epsilon,
        safety_rule=instance.uncertainty.safety_rule,
    )
    winds = [s for s in instance.participants if s.kind == ParticipantKind.WIND]
    src = {s.name: k for k, s in enumerate(winds)}
    bids = [
        build_participant_bid(s, u0, r_factor=0.0, source_index=src.get(s.name))
        for s in instance.participants
    ]
    det = MarketInstance(
        network=instance.network, horizon=instance.horizon,
        num_commodities=instance.num_commodities,
        label=instance.label + ":perfect_forecast",
        participants=instance.participants, uncertainty=u0, bids=bids,
    )
    prog, maps = assemble_mc(det, bids, fix_policies_to_zero=True)
    res = solve(prog, settings)
    return extract_outcome(det, prog, maps, res, design="mc_perfect")


def flexibility_payment_rate(
    outcome: MarketOutcome, perfect: MarketOutcome, commodity: int = 1
) -> dict[tuple[str, int], float | None]:
    """Payment rate per MWh of deviation from the perfect-forecast dispatch.

    rate(i, t) = price(flex, node_i, t) * policy(i, t) / |q_hat - q_perfect|;
    None marks degenerate denominators (identical dispatch).
    """
    if outcome.status is not SolveStatus.OPTIMAL or perfect.status is not SolveStatus.OPTIMAL:
        raise ValueError("both outcomes must be optimal")
    if perfect.label.replace(":perfect_forecast", "") != outcome.label:
        raise ValueError("perfect-forecast outcome belongs to a different instance")
    if set(perfect.maps.bids) != set(outcome.maps.bids):
        raise ValueError("participant sets differ between the two outcomes")
    node_idx = {nm: i for i, nm in enumerate(outcome.nodes)}
    rates: dict[tuple[str, int], float | None] = {}
    for name, bid in outcome.maps.bids.items():
        coup = bid.coupling.get(commodity)
        if coup is None or coup.kind != CouplingKind.RECOURSE_POLICY:
            continue
        alpha = outcome.policy(name)
        q_hat = outcome.allocations[name][:, bid.coupling[0].slot]
        q_bar = perfect.allocations[name][:, perfect.maps.bids[name].coupling[0].slot]
        ni = node_idx[bid.node]
        for t in range(bid.horizon):
            denom = abs(q_hat[t] - q_bar[t])
            if denom < 1e-9:
                rates[(name, t)] = None
            else:
                rates[(name, t)] = float(outcome.prices[commodity, ni, t] * alpha[t] / denom)
    return rates


def outcome_prices_csv(outcome: MarketOutcome, path: str) -> None:
    """Tidy CSV (node, hour, commodity, value) of the nodal price matrices."""
    with open(path, "w") as f:
        f.write("node,hour,commodity,value\n")
        p_count, n_count, t_hor = outcome.prices.shape
        for p in range(p_count):
            for ni in range(n_count):
                for t in range(t_hor):
                    f.write(f"{outcome.nodes[ni]},{t},{p},{outcome.prices[p, ni, t]!r}\n")


def outcome_dispatch_csv(outcome: MarketOutcome, path: str, design: str | None = None) -> None:
    with open(path, "w") as f:
        f.write("design,participant,hour,dispatch,policy\n")
        d = design or outcome.design
        for name in outcome.allocations:
            disp = outcome.dispatch(name)
            pol = outcome.policy(name)
            for t in range(len(disp)):
                f.write(f"{d},{name},{t},{disp[t]!r},{pol[t]!r}\n")
