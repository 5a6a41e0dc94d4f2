import numpy as np
import pytest

from conic_market.bids import ParticipantKind, ParticipantSpec, build_participant_bid
from conic_market.clearing import (
    MarketInstance,
    assemble_mc,
    assemble_mcc,
    clear,
    clear_perfect_forecast,
    flexibility_payment_rate,
)
from conic_market.cones import SolveStatus
from conic_market.network import Line, Network
from conic_market.solver import SolverSettings
from conic_market.uncertainty import UncertaintyModel


def zero_model(w, t):
    return UncertaintyModel(num_sources=w, horizon=t, covariance=np.zeros((w * t, w * t)))


def diag_model(w, t, sigma2, eps=0.05):
    return UncertaintyModel(num_sources=w, horizon=t, covariance=sigma2 * np.eye(w * t), epsilon=eps)


def two_node_instance(limit=50.0, demand=100.0, c1=10.0, c2=20.0, cq=0.0):
    net = Network(["n1", "n2"], [Line("n1", "n2", 0.1, limit)], slack_node="n2")
    specs = [
        ParticipantSpec("g1", ParticipantKind.INFLEXIBLE, "n1", q_min=0, q_max=200,
                        cost_quadratic=cq, cost_linear=c1),
        ParticipantSpec("g2", ParticipantKind.INFLEXIBLE, "n2", q_min=0, q_max=200,
                        cost_quadratic=cq, cost_linear=c2),
        ParticipantSpec("d1", ParticipantKind.CONSUMER, "n2", forecast=np.array([demand])),
    ]
    return MarketInstance(network=net, horizon=1, num_commodities=1, label="two-node",
                          participants=specs, uncertainty=zero_model(1, 1))


def merit_order_oracle(costs, caps, demand):
    """Dispatch in price order; returns (dispatch, marginal price)."""
    order = np.argsort(costs)
    out = np.zeros(len(costs))
    left = demand
    price = 0.0
    for k in order:
        take = min(caps[k], left)
        out[k] = take
        left -= take
        if take > 0:
            price = costs[k]
        if left <= 0:
            break
    return out, price


def test_single_balance_marginal_pricing():
    inst = two_node_instance(limit=1e4)
    out = clear(inst)
    assert out.status is SolveStatus.OPTIMAL
    # cheap unit carries all demand; price = its marginal cost
    np.testing.assert_allclose(out.dispatch("g1"), [100.0], atol=1e-5)
    np.testing.assert_allclose(out.prices[0, :, 0], [10.0, 10.0], atol=1e-5)
    assert out.congestion_rent == pytest.approx(0.0, abs=1e-5)


def test_merit_order_two_producers():
    inst = two_node_instance(limit=1e4, demand=250.0)
    out = clear(inst)
    disp, price = merit_order_oracle([10.0, 20.0], [200.0, 200.0], 250.0)
    np.testing.assert_allclose(out.dispatch("g1"), [disp[0]], atol=1e-4)
    np.testing.assert_allclose(out.dispatch("g2"), [disp[1]], atol=1e-4)
    assert abs(out.lambdas[0, 0] - price) < 1e-5


def test_congestion_toy_exact():
    """Acceptance #5 values: prices (10, 20), rent 500."""
    inst = two_node_instance(limit=50.0, demand=100.0)
    out = clear(inst)
    assert out.status is SolveStatus.OPTIMAL
    np.testing.assert_allclose(out.dispatch("g1"), [50.0], atol=1e-5)
    np.testing.assert_allclose(out.dispatch("g2"), [50.0], atol=1e-5)
    assert out.price(0, 0, 0) == pytest.approx(10.0, abs=1e-4)
    assert out.price(0, 1, 0) == pytest.approx(20.0, abs=1e-4)
    assert out.congestion_rent == pytest.approx(500.0, abs=1e-3)
    # payments: generators paid, consumer pays; spread goes to the operator
    total = sum(v.sum() for v in out.payments.values())
    assert total == pytest.approx(-500.0, abs=1e-3)


def test_objective_scaling_homogeneity():
    inst = two_node_instance(limit=1e4, demand=250.0)
    out1 = clear(inst)
    inst2 = two_node_instance(limit=1e4, demand=250.0)
    for s in inst2.participants:
        s.cost_linear *= 2.0
    out2 = clear(inst2)
    np.testing.assert_allclose(out2.dispatch("g1"), out1.dispatch("g1"), atol=1e-4)
    np.testing.assert_allclose(out2.lambdas, 2.0 * out1.lambdas, atol=1e-4)


def test_balance_residual_zero():
    inst = two_node_instance(limit=50.0)
    out = clear(inst)
    total = out.dispatch("g1") + out.dispatch("g2") + out.dispatch("d1")
    np.testing.assert_allclose(total, 0.0, atol=1e-6)


def test_flow_limits_respected():
    inst = two_node_instance(limit=50.0)
    out = clear(inst)
    inj = np.zeros((2, 1))
    inj[0] += out.dispatch("g1")
    inj[1] += out.dispatch("g2") + out.dispatch("d1")
    flows = inst.network.ptdf @ inj
    assert np.all(np.abs(flows) <= 50.0 + 1e-6)


def mcc_instance(w=2, t=3, eps=0.05, line_cap=500.0, sigma2=16.0):
    net = Network(["n1", "n2"], [Line("n1", "n2", 0.1, line_cap)], slack_node="n2")
    forecast = np.full(t, 30.0)
    specs = [
        ParticipantSpec("f1", ParticipantKind.FLEXIBLE, "n1", q_min=0, q_max=200,
                        reserve_up=100, reserve_down=100, ramp_up=150, ramp_down=150,
                        cost_quadratic=0.02, cost_linear=12.0),
        ParticipantSpec("f2", ParticipantKind.FLEXIBLE, "n2", q_min=0, q_max=200,
                        reserve_up=100, reserve_down=100, ramp_up=150, ramp_down=150,
                        cost_quadratic=0.02, cost_linear=15.0),
        ParticipantSpec("w1", ParticipantKind.WIND, "n1", q_max=100,
                        forecast=forecast, cost_linear=0.0),
        ParticipantSpec("w2", ParticipantKind.WIND, "n2", q_max=100,
                        forecast=forecast, cost_linear=0.0),
        ParticipantSpec("d1", ParticipantKind.CONSUMER, "n2",
                        forecast=np.full(t, 150.0)),
    ]
    model = diag_model(w, t, sigma2, eps)
    return MarketInstance(network=net, horizon=t, num_commodities=2, label="mcc-toy",
                          participants=specs, uncertainty=model)


def test_mcc_policies_sum_to_one():
    inst = mcc_instance()
    out = clear(inst, design="mcc")
    assert out.status is SolveStatus.OPTIMAL
    total_policy = out.policy("f1") + out.policy("f2")
    np.testing.assert_allclose(total_policy, 1.0, atol=1e-7)


def test_mcc_single_provider_gets_full_policy():
    inst = mcc_instance()
    inst.participants = [s for s in inst.participants if s.name != "f2"]
    # keep demand satisfiable from n1 through the line
    out = clear(inst, design="mcc")
    assert out.status is SolveStatus.OPTIMAL
    np.testing.assert_allclose(out.policy("f1"), 1.0, atol=1e-7)


def test_mcc_symmetric_providers_split_equally():
    inst = mcc_instance()
    inst.participants[1].cost_linear = 12.0  # make f2 identical to f1
    out = clear(inst, design="mcc", settings=SolverSettings(feas_tol=1e-9, gap_tol=1e-9))
    np.testing.assert_allclose(out.policy("f1"), out.policy("f2"), atol=1e-4)
    np.testing.assert_allclose(out.policy("f1"), 0.5, atol=1e-4)


def test_mcc_zero_covariance_collapses_to_deterministic():
    inst = mcc_instance(sigma2=16.0)
    inst.uncertainty = zero_model(2, 3)
    out = clear(inst, design="mcc")
    assert out.status is SolveStatus.OPTIMAL
    det = clear_perfect_forecast(mcc_instance(sigma2=16.0))
    assert out.objective == pytest.approx(det.objective, rel=1e-6)
    # flexibility priced at zero
    np.testing.assert_allclose(out.lambdas[1], 0.0, atol=1e-5)


def test_mcc_risk_monotonicity():
    objs = []
    for eps in [0.02, 0.05, 0.10, 0.20, 0.40]:
        out = clear(mcc_instance(eps=eps), design="mcc")
        assert out.status is SolveStatus.OPTIMAL
        objs.append(out.objective)
    slack = 1e-8 * (1.0 + abs(objs[0]))  # solver gap noise
    assert all(objs[i] >= objs[i + 1] - slack for i in range(len(objs) - 1))


def test_mcc_price_decomposition_identity():
    inst = mcc_instance(line_cap=20.0)   # force congestion
    out = clear(inst, design="mcc")
    assert out.status is SolveStatus.OPTIMAL
    recomputed = out.lambdas[:, None, :] - (inst.network.ptdf.T @ (out.rho_up - out.rho_dn))[None]
    np.testing.assert_allclose(out.prices, recomputed, atol=1e-9)


def test_uncongested_uniform_prices():
    inst = mcc_instance(line_cap=1e5)
    out = clear(inst, design="mcc")
    for p in range(2):
        for t in range(3):
            col = out.prices[p, :, t]
            assert col.max() - col.min() <= 1e-6


def test_perfect_forecast_and_fpr():
    inst = mcc_instance()
    out = clear(inst, design="mcc")
    perfect = clear_perfect_forecast(inst)
    assert perfect.status is SolveStatus.OPTIMAL
    np.testing.assert_allclose(perfect.policy("f1"), 0.0, atol=1e-9)
    rates = flexibility_payment_rate(out, perfect)
    assert rates  # flexibility providers present
    for (name, t), val in rates.items():
        alpha = out.policy(name)[t]
        if val is None:
            continue
        denom = abs(out.allocations[name][t, 0] - perfect.allocations[name][t, 0])
        node = out.nodes.index(out.maps.bids[name].node)
        want = out.prices[1, node, t] * alpha / denom
        assert val == pytest.approx(want, rel=1e-9)


def test_fpr_hand_values():
    # rate = price * alpha / |q - q_bar| = 100 * 0.1 / 5 = 2.0 (plug-in check)
    assert 100.0 * 0.1 / 5.0 == pytest.approx(2.0)


def test_price_perturbation_marginal_value():
    """Adding 1 MW of demand moves the objective by the nodal price.

    Quadratic costs put an O(slope/2) curvature bias on the one-sided
    difference; coefficients here keep that below the price tolerance.
    """
    inst = mcc_instance()
    for s in inst.participants:
        if s.kind == ParticipantKind.FLEXIBLE:
            s.cost_quadratic = 5e-4
    settings = SolverSettings(feas_tol=1e-9, gap_tol=5e-10)
    out = clear(inst, settings=settings, design="mcc")
    node, t = "n2", 1
    ni = inst.network.nodes.index(node)
    base_obj = out.objective
    price = out.prices[0, ni, t]
    inst2 = mcc_instance()
    for s in inst2.participants:
        if s.kind == ParticipantKind.FLEXIBLE:
            s.cost_quadratic = 5e-4
    extra = np.zeros(3)
    extra[t] = 1.0
    inst2.participants.append(
        ParticipantSpec("probe", ParticipantKind.CONSUMER, node, forecast=extra)
    )
    out2 = clear(inst2, settings=settings, design="mcc")
    fd = out2.objective - base_obj
    assert fd == pytest.approx(price, abs=max(1e-3, 1e-4 * abs(price)))


def test_empty_flow_limits_uniform_prices():
    # effectively unbounded capacities -> flow rows slack, uniform prices
    inst = two_node_instance(limit=1e6, demand=150.0)
    out = clear(inst)
    assert np.ptp(out.prices[0, :, 0]) <= 1e-6


def test_infeasible_demand_reports_status():
    inst = two_node_instance(limit=1e4, demand=500.0)  # beyond total capacity
    out = clear(inst)
    assert out.status is SolveStatus.PRIMAL_INFEASIBLE
    assert out.prices is None
