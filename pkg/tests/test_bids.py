import numpy as np
import pytest
import scipy.sparse as sp

from conic_market.bids import (
    ConicBid,
    Coupling,
    CouplingKind,
    ParticipantKind,
    ParticipantSpec,
    branch_flow_soc,
    build_participant_bid,
    chance_to_soc,
    cost_recovery_precondition,
    count_chance_inequalities,
    gas_pipeline_soc,
    linear_to_soc,
    quad_cost_epigraph,
)
from conic_market.uncertainty import UncertaintyModel, cholesky_block


def make_model(w=1, t=2, sigma2=25.0, eps=0.05):
    cov = sigma2 * np.eye(w * t)
    return UncertaintyModel(num_sources=w, horizon=t, covariance=cov, epsilon=eps)


def test_linear_to_soc_halfspaces():
    c = linear_to_soc([1.0], 0.0)
    assert c.m == 0
    assert c.margin(np.array([2.0])) == 2.0       # q >= 0 with margin q
    c2 = linear_to_soc([-1.0], 100.0)
    assert c2.margin(np.array([30.0])) == 70.0    # q <= 100


def test_zero_block_normalization():
    # m > 0 with an all-zero A collapses to e' = e - ||b||
    raw = chance_to_soc([1.0], sp.csr_matrix(np.zeros((2, 1))), 5.0,
                        np.eye(2), None, r=1.0)
    assert raw.m == 0 and raw.e == 5.0
    from conic_market.bids import SocConstraint
    c = SocConstraint(sp.csr_matrix(np.zeros((2, 1))), np.array([3.0, 4.0]),
                      np.array([0.0]), 7.0).normalized()
    assert c.m == 0
    assert c.e == pytest.approx(7.0 - 5.0)


def test_quad_cost_epigraph_values():
    c, z_idx = quad_cost_epigraph([1.0])
    assert z_idx == 1
    # tightest z at q = 3 is 9: margin of (q, z) = (3, 9) is zero
    assert c.margin(np.array([3.0, 9.0])) == pytest.approx(0.0)
    c0, _ = quad_cost_epigraph([0.0])
    assert c0.margin(np.array([123.0, 0.0])) == pytest.approx(0.0)  # trivially satisfiable
    c2, z2 = quad_cost_epigraph([2.0, 0.5])
    v = np.array([1.0, 2.0, 4.0])
    assert c2.margin(v) == pytest.approx(0.0)  # z* = 2*1 + 0.5*4 = 4
    with pytest.raises(ValueError):
        quad_cost_epigraph([-1.0])


def test_chance_to_soc_scalar_case():
    # W=1, sigma^2=25, r=2, bound 100: 2*5*|alpha| <= 100 - q_hat
    x = np.array([[5.0]])
    weights = sp.csr_matrix(np.array([[0.0, 1.0]]))  # xi weight on alpha
    nominal = np.array([1.0, 0.0])                   # q_hat
    c = chance_to_soc(nominal, weights, 100.0, x, None, r=2.0)
    v = np.array([90.0, 1.0])   # q_hat = 90, alpha = 1 -> 10 <= 10
    assert c.margin(v) == pytest.approx(0.0)
    v2 = np.array([90.0, 1.01])
    assert c.margin(v2) < 0


def test_chance_to_soc_degenerate_r_and_alpha():
    x = np.array([[5.0]])
    weights = sp.csr_matrix(np.array([[0.0, 1.0]]))
    nominal = np.array([1.0, 0.0])
    c0 = chance_to_soc(nominal, weights, 100.0, x, None, r=0.0)
    assert c0.m == 0                       # nominal linear constraint
    assert c0.margin(np.array([100.0, 55.0])) == pytest.approx(0.0)
    c = chance_to_soc(nominal, weights, 100.0, x, None, r=2.0)
    assert c.margin(np.array([100.0, 0.0])) == pytest.approx(0.0)  # alpha = 0 nominal cap


def test_gas_pipeline_exact_parameters():
    c = gas_pipeline_soc(1.0)
    # pressures 5/3: feasible flow up to 4 (phi^2 <= 25 - 9)
    assert c.margin(np.array([4.0, 3.0, 5.0])) == pytest.approx(0.0, abs=1e-12)
    assert c.margin(np.array([4.1, 3.0, 5.0])) < 0
    # equal pressures force zero flow
    assert c.margin(np.array([0.0, 2.0, 2.0])) == pytest.approx(0.0)
    assert c.margin(np.array([0.5, 2.0, 2.0])) < 0
    # doubling beta doubles feasible flow
    c2 = gas_pipeline_soc(2.0)
    assert c2.margin(np.array([8.0, 3.0, 5.0])) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        gas_pipeline_soc(-1.0)


def test_branch_flow_exact_parameters():
    c_def, c_cap = branch_flow_soc(5.0)
    # 3-4-5: 9 + 16 = 25 = theta * v with theta = v = 5
    assert c_def.margin(np.array([3.0, 4.0, 5.0, 5.0])) == pytest.approx(0.0, abs=1e-12)
    assert c_def.margin(np.zeros(4)) == 0.0
    assert c_cap.margin(np.array([6.0, 0.0, 0.0, 0.0])) < 0  # apparent power above cap


def test_reformulation_soundness_sampled(rng):
    """Points satisfying the original constraint satisfy the emitted SOC row."""
    model = make_model(w=2, t=1, sigma2=4.0)
    x = cholesky_block(model.covariance, [0], 2)
    weights = sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 1.0]]))  # alpha on both errors
    nominal = np.array([1.0, 0.0])
    r = 1.5
    con = chance_to_soc(nominal, weights, 50.0, x, None, r=r)
    for _ in range(1000):
        q, a = rng.uniform(0, 40), rng.uniform(-3, 3)
        lhs = q + r * np.sqrt(np.ones(2) @ model.covariance @ np.ones(2)) * abs(a)
        if lhs <= 50.0:
            assert con.margin(np.array([q, a])) >= -1e-9


def test_chance_row_monte_carlo_validity(rng):
    """At the SOC boundary the constraint holds with probability ~ 1 - eps."""
    from conic_market.uncertainty import safety_factor
    eps = 0.1
    sigma2 = 9.0
    r = safety_factor(eps)
    x = np.array([[3.0]])
    weights = sp.csr_matrix(np.array([[0.0, 1.0]]))
    con = chance_to_soc(np.array([1.0, 0.0]), weights, 100.0, x, None, r=r)
    alpha = 2.0
    q_hat = 100.0 - r * 3.0 * alpha  # boundary point
    assert con.margin(np.array([q_hat, alpha])) == pytest.approx(0.0, abs=1e-9)
    draws = rng.normal(0.0, 3.0, size=50_000)
    viol = np.mean(q_hat + draws * alpha > 100.0)
    sigma_bin = np.sqrt(eps * (1 - eps) / 50_000)
    assert viol <= eps + 3 * sigma_bin
    assert viol >= eps - 4 * sigma_bin  # tight at the boundary, not conservative


def test_inflexible_bid_shape():
    spec = ParticipantSpec("g1", ParticipantKind.INFLEXIBLE, "n1", q_min=0, q_max=50,
                           cost_quadratic=0.01, cost_linear=12.0)
    bid = build_participant_bid(spec, make_model(1, 3, 25.0))
    assert bid.slots_per_hour == 1
    assert all(c.m == 0 for c in bid.soc_constraints)  # box rows only
    assert len(bid.soc_constraints) == 6
    assert cost_recovery_precondition(bid)


def test_flexible_bid_ramp_rows_dimension():
    model = make_model(w=3, t=2, sigma2=1.0)
    spec = ParticipantSpec("f1", ParticipantKind.FLEXIBLE, "n1", q_min=0, q_max=100,
                           reserve_up=30, reserve_down=30, ramp_up=50, ramp_down=50,
                           cost_quadratic=0.02, cost_linear=10.0)
    bid = build_participant_bid(spec, model)
    ramps = [c for c in bid.soc_constraints if "ramp" in c.label]
    assert len(ramps) == 2                      # t=2, both directions
    assert all(c.m == 2 * 3 for c in ramps)     # 2W rows -> (2W+1)-dim cones
    assert cost_recovery_precondition(bid)
    # variance-weighted quadratic policy cost
    assert bid.cost_quadratic[0, 1] == pytest.approx(0.02 * 3.0)


def test_storage_bid_end_of_horizon_band():
    model = make_model(w=1, t=3, sigma2=0.0)
    spec = ParticipantSpec(
        "s1", ParticipantKind.STORAGE, "n1",
        eta_charge=0.9, eta_discharge=0.9, charge_max=10, discharge_max=10,
        energy_min=0, energy_max=40, energy_initial=20,
        band_below=0.0, band_above=0.0, cost_quadratic=0.001, cost_linear=1.0,
    )
    bid = build_participant_bid(spec, model, r_factor=0.0)
    eoh = [c for c in bid.soc_constraints if "eoh" in c.label]
    assert len(eoh) == 2
    # zero band with zero policies forces sum of dispatch to zero
    q = np.zeros(bid.num_vars)
    q[bid.col(0, 0)], q[bid.col(1, 0)], q[bid.col(2, 0)] = 5.0, -5.0, 0.0
    assert all(c.margin(q) >= -1e-12 for c in eoh)
    q[bid.col(2, 0)] = 1.0
    assert any(c.margin(q) < 0 for c in eoh)
    assert cost_recovery_precondition(bid)


def test_consumer_bid_fixed_and_flagged():
    spec = ParticipantSpec("d1", ParticipantKind.CONSUMER, "n2",
                           forecast=np.array([100.0, 120.0]))
    bid = build_participant_bid(spec, make_model(1, 2))
    assert bid.num_eq() == 2
    np.testing.assert_allclose(bid.eq_rhs, [-100.0, -120.0])
    assert not cost_recovery_precondition(bid)   # inelastic demand: h != 0 by design


def test_wind_bid_bounds_and_source_tag():
    spec = ParticipantSpec("w1", ParticipantKind.WIND, "n1",
                           q_max=80.0, forecast=np.array([40.0, 60.0]))
    bid = build_participant_bid(spec, make_model(1, 2), source_index=0)
    assert bid.slots_per_hour == 1
    assert bid.coupling[1].kind == CouplingKind.UNCERTAINTY_SOURCE
    assert cost_recovery_precondition(bid)
    ups = [c for c in bid.soc_constraints if "cap_up" in c.label]
    assert ups[0].margin(np.array([40.0, 0.0])) == pytest.approx(0.0)


def test_forced_output_unit_fails_precondition():
    spec = ParticipantSpec("g2", ParticipantKind.INFLEXIBLE, "n1", q_min=20, q_max=50,
                           cost_linear=5.0)
    bid = build_participant_bid(spec, make_model(1, 2))
    assert not cost_recovery_precondition(bid)   # e = -q_min < 0 on the lower row


def test_inconsistent_storage_spec_rejected():
    with pytest.raises(ValueError, match="initial energy"):
        ParticipantSpec("s", ParticipantKind.STORAGE, "n1",
                        energy_min=0, energy_max=10, energy_initial=20)


def test_count_chance_inequalities():
    specs = [
        ParticipantSpec("f", ParticipantKind.FLEXIBLE, "n1", q_max=10, cost_linear=1),
        ParticipantSpec("s", ParticipantKind.STORAGE, "n1", energy_max=10, energy_initial=5,
                        charge_max=5, discharge_max=5),
        ParticipantSpec("w", ParticipantKind.WIND, "n1", forecast=np.zeros(4)),
    ]
    t = 4
    got = count_chance_inequalities(specs, num_lines=3, t_hor=t)
    # flexible: 4*4 + 2*3 = 22; storage: 2*4 + 2*4 + 2 = 18; network: 2*3*4 = 24
    assert got == 22 + 18 + 24
