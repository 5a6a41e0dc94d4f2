import numpy as np
import pytest

from conic_market.bids import ParticipantKind, ParticipantSpec
from conic_market.clearing import MarketInstance, clear
from conic_market.cones import SolveStatus
from conic_market.economics import (
    balance_residuals,
    check_cost_recovery,
    check_revenue_adequacy,
    congestion_rent,
    economics_report,
    kkt_equilibrium_residuals,
    participant_payoff,
)
from conic_market.network import Line, Network
from conic_market.solver import SolverSettings
from conic_market.uncertainty import UncertaintyModel

from test_clearing import mcc_instance, two_node_instance, zero_model

TIGHT = SolverSettings(feas_tol=1e-10, gap_tol=1e-10, max_iterations=100)


@pytest.fixture(scope="module")
def congested():
    inst = two_node_instance(limit=50.0)
    out = clear(inst, settings=TIGHT)
    assert out.status is SolveStatus.OPTIMAL
    return inst, out


@pytest.fixture(scope="module")
def mcc_cleared():
    inst = mcc_instance(line_cap=25.0)   # mildly congested stochastic market
    out = clear(inst, design="mcc", settings=TIGHT)
    assert out.status is SolveStatus.OPTIMAL
    return inst, out


def test_zero_allocation_zero_payoff(congested):
    inst, _ = congested
    # add an expensive idle producer: zero dispatch -> zero payoff
    inst2 = two_node_instance(limit=50.0)
    inst2.participants.append(
        ParticipantSpec("idle", ParticipantKind.INFLEXIBLE, "n2", q_min=0, q_max=50,
                        cost_linear=1000.0)
    )
    out = clear(inst2, settings=TIGHT)
    rep = participant_payoff(out, "idle")
    assert rep.payoff == pytest.approx(0.0, abs=1e-5)


def test_marginal_producer_zero_payoff(congested):
    _, out = congested
    # g2 is marginal at n2: price 20 equals its linear cost
    rep = participant_payoff(out, "g2")
    assert rep.payoff == pytest.approx(0.0, abs=1e-4)


def test_inframarginal_producer_payoff(congested):
    _, out = congested
    # g1 sells 50 MWh at nodal price 10 with cost 10: zero spread at its node;
    # construct the textbook case on an uncongested variant instead
    inst = two_node_instance(limit=1e4, demand=250.0)
    out2 = clear(inst, settings=TIGHT)
    rep = participant_payoff(out2, "g1")
    # cleared at lambda=20 with cost 10 on 200 MWh
    assert rep.payoff == pytest.approx(200.0 * 10.0, abs=1e-3)


def test_cost_recovery_all_pass_with_precondition(congested):
    _, out = congested
    reports = check_cost_recovery(out)
    for name, rep in reports.items():
        if rep.precondition_ok:
            assert rep.cost_recovery_ok, name
    # consumer flagged out-of-guarantee by design
    assert not reports["d1"].precondition_ok


def test_forced_output_flagged_informational():
    inst = two_node_instance(limit=1e4)
    inst.participants[1] = ParticipantSpec(
        "g2", ParticipantKind.INFLEXIBLE, "n2", q_min=80.0, q_max=200.0,
        cost_linear=20.0,
    )
    out = clear(inst, settings=TIGHT)
    reports = check_cost_recovery(out)
    assert not reports["g2"].precondition_ok
    # forced output above demand need: price set by cheap unit, g2 loses money
    assert reports["g2"].payoff < 0


def test_revenue_adequacy_uncongested():
    inst = two_node_instance(limit=1e4)
    out = clear(inst, settings=TIGHT)
    value, residual = check_revenue_adequacy(out, inst)
    assert residual <= 1e-5
    assert value >= -1e-6


def test_revenue_adequacy_congested_toy(congested):
    inst, out = congested
    value, residual = check_revenue_adequacy(out, inst)
    # merchandising surplus equals congestion rent paid out: exact budget balance
    assert residual <= 1e-5 * (1 + 2000.0)
    rent_dual, rent_primal = congestion_rent(out, inst)
    assert rent_dual == pytest.approx(500.0, abs=1e-3)
    assert rent_primal == pytest.approx(500.0, abs=1e-3)


def test_congestion_rent_zero_uncongested():
    inst = two_node_instance(limit=1e4)
    out = clear(inst, settings=TIGHT)
    rent_dual, rent_primal = congestion_rent(out, inst)
    assert rent_dual == pytest.approx(0.0, abs=1e-5)
    assert rent_primal == pytest.approx(0.0, abs=1e-5)
    assert rent_dual >= -1e-9


def test_kkt_residuals_small_at_optimum(mcc_cleared):
    inst, out = mcc_cleared
    kkt = kkt_equilibrium_residuals(out, inst)
    assert kkt["stationarity_inf_norm"] <= 1e-6
    assert kkt["complementarity_inf_norm"] <= 1e-6
    assert kkt["conic_complementarity_max"] <= 1e-6
    assert kkt["price_identity_inf_norm"] <= 1e-9
    assert kkt["flow_limit_violation"] <= 1e-6


def test_kkt_detects_corrupted_dual(mcc_cleared):
    inst, out = mcc_cleared
    row = out.maps.balance_rows[(0, 1)]
    out.result.dual[row] += 1.0
    kkt = kkt_equilibrium_residuals(out, inst)
    assert kkt["stationarity_inf_norm"] >= 1.0 - 1e-6
    out.result.dual[row] -= 1.0  # restore shared fixture


def test_inactive_soc_rows_have_tiny_duals(mcc_cleared):
    inst, out = mcc_cleared
    prog, res = out.program, out.result
    for cone, sl in zip(prog.cones, prog.cone_slices()):
        if cone.kind.value != "second_order":
            continue
        sb = res.slack[sl]
        margin = sb[0] - np.linalg.norm(sb[1:])
        if margin > 1e-3:   # strictly inactive row
            yb = res.dual[sl]
            assert np.linalg.norm(yb) <= 1e-5


def test_balance_residual(mcc_cleared):
    _, out = mcc_cleared
    assert balance_residuals(out) <= 1e-6


def test_full_report_checks(mcc_cleared):
    inst, out = mcc_cleared
    rep = economics_report(out, inst)
    checks = rep.all_pass()
    assert all(checks.values()), checks
    d = rep.to_json_dict()
    assert "per_participant" in d and "kkt" in d
