"""Economic-property verification on cleared outcomes.

Evaluates, at the stored primal-dual point: participant payoffs under
single-node delivery, cost recovery (with its bid-side precondition),
revenue adequacy / budget balance of the market operator, congestion-rent
accounting from both primal and dual sides, and the full KKT residual
suite (stationarity, linear and conic complementarity, feasibility
margins). Residual norms are reported as absolute inf-norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bids import CouplingKind, cost_recovery_precondition
from .clearing import MarketOutcome
from .cones import ConeKind, SolveStatus


@dataclass
class ParticipantReport:
    payoff: float
    revenue: float
    cost: float
    cost_recovery_ok: bool
    precondition_ok: bool


@dataclass
class EconomicsReport:
    per_participant: dict[str, ParticipantReport]
    revenue_adequacy_value: float
    budget_balance_residual: float
    congestion_rent: float
    congestion_rent_primal: float
    kkt: dict[str, float]
    transmission_prices: np.ndarray | None = None   # omega, N x T

    def all_pass(self, kkt_tol: float = 1e-6, budget_tol: float = 1e-5) -> dict[str, bool]:
        scale = 1.0 + sum(abs(p.revenue) for p in self.per_participant.values())
        return {
            "cost_recovery": all(
                p.cost_recovery_ok for p in self.per_participant.values() if p.precondition_ok
            ),
            "revenue_adequacy": self.revenue_adequacy_value >= -1e-6 * scale,
            "budget_balance": self.budget_balance_residual <= budget_tol * scale,
            "congestion_rent_consistent": abs(self.congestion_rent - self.congestion_rent_primal)
            <= 1e-6 * (1.0 + abs(self.congestion_rent)),
            "kkt_stationarity": self.kkt["stationarity_inf_norm"] <= kkt_tol,
            "kkt_complementarity": self.kkt["complementarity_inf_norm"] <= kkt_tol,
            "kkt_conic_complementarity": self.kkt["conic_complementarity_max"] <= kkt_tol,
        }

    def to_json_dict(self) -> dict:
        return {
            "per_participant": {
                k: {
                    "payoff": v.payoff,
                    "revenue": v.revenue,
                    "cost": v.cost,
                    "cost_recovery_ok": v.cost_recovery_ok,
                    "precondition_ok": v.precondition_ok,
                }
                for k, v in self.per_participant.items()
            },
            "revenue_adequacy_value": self.revenue_adequacy_value,
            "budget_balance_residual": self.budget_balance_residual,
            "congestion_rent": self.congestion_rent,
            "congestion_rent_primal": self.congestion_rent_primal,
            "kkt": self.kkt,
            "checks": self.all_pass(),
        }


def _require_optimal(outcome: MarketOutcome):
    if outcome.status is not SolveStatus.OPTIMAL:
        raise ValueError(f"outcome is {outcome.status.value}, economics need an optimum")


def participant_payoff(outcome: MarketOutcome, name: str) -> ParticipantReport:
    """Market payoff: price-weighted transactions minus bid cost.

    Transactions are delivered at the participant's own node, so the
    transport charge of the equilibrium objective cancels exactly and the
    payoff reduces to revenue minus cost.
    """
    _require_optimal(outcome)
    bid = outcome.maps.bids[name]
    revenue = float(np.sum(outcome.payments[name]))
    alloc = outcome.allocations[name]
    cost = float(np.sum(outcome.epigraphs[name])) + float(
        np.sum(bid.cost_linear * alloc)
    ) + bid.cost_constant
    payoff = revenue - cost
    pre = cost_recovery_precondition(bid)
    scale = 1.0 + abs(revenue) + abs(cost)
    return ParticipantReport(
        payoff=payoff,
        revenue=revenue,
        cost=cost,
        cost_recovery_ok=payoff >= -1e-6 * scale,
        precondition_ok=pre,
    )


def check_cost_recovery(outcome: MarketOutcome) -> dict[str, ParticipantReport]:
    _require_optimal(outcome)
    return {name: participant_payoff(outcome, name) for name in outcome.maps.bids}


def nodal_injections(outcome: MarketOutcome) -> np.ndarray:
    """N x T net nodal injections summed over linear commodity couplings."""
    _require_optimal(outcome)
    t_hor = next(iter(outcome.allocations.values())).shape[0]
    y = np.zeros((len(outcome.nodes), t_hor))
    node_idx = {nm: i for i, nm in enumerate(outcome.nodes)}
    for name, bid in outcome.maps.bids.items():
        coup = bid.coupling.get(0)
        if coup is None or coup.kind != CouplingKind.LINEAR:
            continue
        y[node_idx[bid.node]] += coup.linear_matrix(t_hor) @ outcome.allocations[name][:, coup.slot]
    return y


def congestion_rent(outcome: MarketOutcome, instance) -> tuple[float, float]:
    """(dual form, primal form) of the rent; they agree at an optimum.

    Dual form: sum_t s_bar'(rho_up + rho_dn). Primal form: -sum_t omega_t'y_t
    with omega = -Psi'(rho_up - rho_dn), i.e. the flow-weighted dual spread.
    """
    _require_optimal(outcome)
    caps = instance.network.capacities
    dual_form = float(np.sum(caps[:, None] * (outcome.rho_up + outcome.rho_dn)))
    y = nodal_injections(outcome)
    flows = instance.network.ptdf @ y
    primal_form = float(np.sum((outcome.rho_up - outcome.rho_dn) * flows))
    return dual_form, primal_form


def check_revenue_adequacy(outcome: MarketOutcome, instance) -> tuple[float, float]:
    """(value, budget balance residual): value = payments received minus the
    transmission payout; the optimum nets the two to zero exactly."""
    _require_optimal(outcome)
    term_a = float(sum(v.sum() for v in outcome.payments.values()))
    _, rent_primal = congestion_rent(outcome, instance)
    value = term_a + rent_primal   # -sum omega'y = +rent
    return value, abs(value)


def kkt_equilibrium_residuals(outcome: MarketOutcome, instance=None) -> dict[str, float]:
    """Residuals of every KKT block at the stored primal-dual point.

    stationarity: ||A'y + c||_inf over all variables (participant stationarity
    in q and z plus the price-decomposition identities fold into this single
    system by construction of the assembly).
    complementarity: worst |y_i s_i| over scalar inequality rows.
    conic complementarity: worst |<s_blk, y_blk>| over SOC/rotated blocks,
    plus dual-cone feasibility margins folded in.
    """
    _require_optimal(outcome)
    prog = outcome.program
    res = outcome.result
    x, y, s = res.primal, res.dual, res.slack
    a = prog.constraint_matrix
    stat = float(np.max(np.abs(a.T @ y + prog.objective), initial=0.0))
    comp_lin = 0.0
    comp_cone = 0.0
    dual_feas = 0.0
    for cone, sl in zip(prog.cones, prog.cone_slices()):
        sb, yb = s[sl], y[sl]
        if cone.kind is ConeKind.NONNEGATIVE:
            comp_lin = max(comp_lin, float(np.max(np.abs(sb * yb), initial=0.0)))
            dual_feas = max(dual_feas, float(np.max(-yb, initial=0.0)))
        elif cone.kind is ConeKind.SECOND_ORDER:
            comp_cone = max(comp_cone, abs(float(sb @ yb)))
            dual_feas = max(dual_feas, float(np.linalg.norm(yb[1:]) - yb[0]))
        elif cone.kind is ConeKind.ROTATED_SECOND_ORDER:
            comp_cone = max(comp_cone, abs(float(sb @ yb)))
            margin = 2.0 * yb[0] * yb[1] - float(np.dot(yb[2:], yb[2:]))
            dual_feas = max(dual_feas, -min(margin, yb[0], yb[1]))
    # primal feasibility residual of the stored point
    pres = float(np.max(np.abs(a @ x + s - prog.constraint_offset), initial=0.0))
    out = {
        "stationarity_inf_norm": stat,
        "complementarity_inf_norm": comp_lin,
        "conic_complementarity_max": comp_cone,
        "primal_feasibility_inf_norm": pres,
        "dual_cone_violation": max(dual_feas, 0.0),
    }
    if instance is not None:
        # price decomposition identity (recomputable from stored parts)
        recomputed = outcome.lambdas[:, None, :] - (
            instance.network.ptdf.T @ (outcome.rho_up - outcome.rho_dn)
        )[None]
        out["price_identity_inf_norm"] = float(np.max(np.abs(outcome.prices - recomputed)))
        # flow-limit satisfaction of the cleared nominal injections
        flows = instance.network.ptdf @ nodal_injections(outcome)
        out["flow_limit_violation"] = float(
            np.max(np.abs(flows) - instance.network.capacities[:, None], initial=-np.inf)
        )
    return out


def balance_residuals(outcome: MarketOutcome) -> float:
    """Worst commodity balance violation sum_i G_ip q_ip (or policy sum - 1)."""
    _require_optimal(outcome)
    t_hor = next(iter(outcome.allocations.values())).shape[0]
    worst = 0.0
    lin_total = np.zeros(t_hor)
    pol_total = np.zeros(t_hor)
    has_pol = False
    for name, bid in outcome.maps.bids.items():
        for p, coup in bid.coupling.items():
            if coup.kind == CouplingKind.LINEAR and p == 0:
                lin_total += coup.linear_matrix(t_hor) @ outcome.allocations[name][:, coup.slot]
            elif coup.kind == CouplingKind.RECOURSE_POLICY:
                pol_total += outcome.allocations[name][:, coup.slot]
                has_pol = True
    worst = float(np.max(np.abs(lin_total), initial=0.0))
    if has_pol and outcome.maps.policy_names:
        worst = max(worst, float(np.max(np.abs(pol_total - 1.0))))
    return worst


def economics_report(outcome: MarketOutcome, instance) -> EconomicsReport:
    _require_optimal(outcome)
    per = check_cost_recovery(outcome)
    value, residual = check_revenue_adequacy(outcome, instance)
    rent_dual, rent_primal = congestion_rent(outcome, instance)
    kkt = kkt_equilibrium_residuals(outcome, instance)
    return EconomicsReport(
        per_participant=per,
        revenue_adequacy_value=value,
        budget_balance_residual=residual,
        congestion_rent=rent_dual,
        congestion_rent_primal=rent_primal,
        kkt=kkt,
        transmission_prices=-(instance.network.ptdf.T @ (outcome.rho_up - outcome.rho_dn)),
    )
