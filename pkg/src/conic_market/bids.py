"""Conic bid data model and SOC constraint template builders.

A bid collects, over a participant's stacked hourly decision vector
q in R^(K*T) (hour-major: slot (t, k) at index t*K + k):

- SOC constraints  ||A q + b|| <= d'q + e  (or the rotated, squared-norm form)
- equality rows    F q = h
- per-commodity coupling descriptors
- quadratic/linear price coefficients per hour and slot

Templates cover the recurring constructions: plain linear rows, quadratic
cost epigraphs, chance-constraint reformulations, the gas pipeline
relaxation and the branch-flow relaxation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .uncertainty import UncertaintyModel, cholesky_block, safety_factor


@dataclass
class SocConstraint:
    """||A v + b||_2 <= d'v + e, or with rotated=True  ||A v + b||^2 <= d'v + e."""

    a: sp.csr_matrix
    b: np.ndarray
    d: np.ndarray
    e: float
    rotated: bool = False
    label: str = ""

    def __post_init__(self):
        self.a = sp.csr_matrix(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.d = np.asarray(self.d, dtype=float).ravel()
        self.e = float(self.e)
        if self.a.shape[0] != self.b.shape[0]:
            raise ValueError("A row count != len(b)")
        if self.a.shape[1] != self.d.shape[0]:
            raise ValueError("A column count != len(d)")

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def num_vars(self) -> int:
        return self.a.shape[1]

    def margin(self, v: np.ndarray) -> float:
        """Slack d'v + e - ||Av+b|| (or - ||Av+b||^2 when rotated); >= 0 iff feasible."""
        v = np.asarray(v, dtype=float)
        r = self.a @ v + self.b
        lhs = float(np.dot(r, r)) if self.rotated else float(np.linalg.norm(r))
        return float(self.d @ v) + self.e - lhs

    def normalized(self) -> "SocConstraint":
        """Collapse a zero A block: m rows of zeros reduce to the linear row
        0 <= d'v + e' with e' = e - ||b||."""
        if self.m > 0 and self.a.nnz == 0:
            return SocConstraint(
                sp.csr_matrix((0, self.num_vars)),
                np.zeros(0),
                self.d,
                self.e - float(np.linalg.norm(self.b)),
                rotated=self.rotated,
                label=self.label,
            )
        return self


def linear_to_soc(d, e: float, num_vars: int | None = None, label: str = "") -> SocConstraint:
    """Halfspace 0 <= d'v + e as an m=0 SOC row."""
    d = np.asarray(d, dtype=float).ravel()
    nv = num_vars if num_vars is not None else d.shape[0]
    dd = np.zeros(nv)
    dd[: d.shape[0]] = d
    return SocConstraint(sp.csr_matrix((0, nv)), np.zeros(0), dd, e, label=label)


def quad_cost_epigraph(cq, label: str = "") -> tuple[SocConstraint, int]:
    """Rotated epigraph ||diag(sqrt(cq)) q||^2 <= z over (q, z); z is the last slot.

    Returns (constraint over K+1 variables, index of the auxiliary z slot).
    """
    cq = np.asarray(cq, dtype=float).ravel()
    if np.any(cq < 0):
        raise ValueError("quadratic cost coefficients must be nonnegative")
    k = cq.shape[0]
    rows = np.flatnonzero(cq > 0)
    a = sp.csr_matrix(
        (np.sqrt(cq[rows]), (np.arange(len(rows)), rows)), shape=(len(rows), k + 1)
    )
    d = np.zeros(k + 1)
    d[k] = 1.0
    return SocConstraint(a, np.zeros(len(rows)), d, 0.0, rotated=True, label=label), k


def chance_to_soc(
    nominal,
    uncertainty_weights,
    bound: float,
    chol_factor,
    mean=None,
    r: float = 1.0,
    label: str = "",
) -> SocConstraint:
    """SOC reformulation of P(nominal'v + xi'(M v) <= bound) >= 1 - eps_hat.

    ``uncertainty_weights`` M maps decision vars to per-error-coordinate
    weights; ``chol_factor`` X satisfies Sigma = X X' on the error block.
    Emits the unscaled form r*||X'(M v)|| <= bound - nominal'v - mu'(M v);
    the same halfspace as the 1/r-scaled parameter mapping, with duals
    scaled accordingly. With r = 0 the row degenerates to the nominal
    linear constraint.
    """
    nominal = np.asarray(nominal, dtype=float).ravel()
    m = sp.csr_matrix(uncertainty_weights, dtype=float)
    x = np.asarray(chol_factor, dtype=float)
    if m.shape[1] != nominal.shape[0]:
        raise ValueError("weight columns must match decision dimension")
    if x.shape[0] != m.shape[0]:
        raise ValueError("factor dimension must match weight rows")
    a = sp.csr_matrix(r * (x.T @ m)) if r != 0.0 else sp.csr_matrix((0, nominal.shape[0]))
    d = -nominal.copy()
    if mean is not None:
        d -= m.T @ np.asarray(mean, dtype=float).ravel()
    return SocConstraint(a, np.zeros(a.shape[0]), d, bound, label=label).normalized()


def gas_pipeline_soc(beta: float, label: str = "gas_pipeline") -> SocConstraint:
    """Relaxed pipeline flow-pressure coupling over (flow, p_receive, p_send)."""
    if beta <= 0:
        raise ValueError("friction-geometry constant must be positive")
    a = np.array([[1.0 / beta, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return SocConstraint(
        sp.csr_matrix(a), np.zeros(2), np.array([0.0, 0.0, 1.0]), 0.0, label=label
    )


def branch_flow_soc(s_max: float) -> tuple[SocConstraint, SocConstraint]:
    """Branch-flow relaxation over (p_active, p_reactive, current_sq, voltage_sq).

    First cone: p^2 + q^2 <= current * voltage. Second: apparent-power cap.
    """
    a1 = np.array([[2.0, 0, 0, 0], [0, 2.0, 0, 0], [0, 0, 1.0, -1.0]])
    c1 = SocConstraint(
        sp.csr_matrix(a1), np.zeros(3), np.array([0.0, 0.0, 1.0, 1.0]), 0.0,
        label="branch_flow_def",
    )
    a2 = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    c2 = SocConstraint(
        sp.csr_matrix(a2), np.zeros(2), np.zeros(4), float(s_max), label="branch_flow_cap"
    )
    return c1, c2


# --- participant model ------------------------------------------------------

class ParticipantKind:
    FLEXIBLE = "flexible_pp"
    INFLEXIBLE = "inflexible_pp"
    WIND = "wind"
    CONSUMER = "consumer"
    STORAGE = "storage"


@dataclass
class ParticipantSpec:
    name: str
    kind: str
    node: str
    q_min: float = 0.0
    q_max: float = 0.0
    reserve_up: float = 0.0      # upward flexibility capacity bound
    reserve_down: float = 0.0
    ramp_up: float = np.inf      # MW/h
    ramp_down: float = np.inf
    eta_charge: float = 1.0
    eta_discharge: float = 1.0
    energy_min: float = 0.0      # MWh
    energy_max: float = 0.0
    energy_initial: float = 0.0
    band_below: float = 0.0      # end-of-horizon band around initial energy
    band_above: float = 0.0
    charge_max: float = 0.0      # MW
    discharge_max: float = 0.0
    forecast: np.ndarray | None = None   # T-vector, MW (wind production / consumer demand)
    cost_quadratic: float = 0.0
    cost_linear: float = 0.0
    reserve_cost: float | None = None    # $/MW for R1 reserve capacity

    def __post_init__(self):
        kinds = (ParticipantKind.FLEXIBLE, ParticipantKind.INFLEXIBLE,
                 ParticipantKind.WIND, ParticipantKind.CONSUMER, ParticipantKind.STORAGE)
        if self.kind not in kinds:
            raise ValueError(f"unknown participant kind {self.kind!r}")
        if self.q_min > self.q_max:
            raise ValueError(f"{self.name}: q_min > q_max")
        if not 0.0 <= self.eta_charge <= 1.0 or not 0.0 <= self.eta_discharge <= 1.0:
            raise ValueError(f"{self.name}: efficiencies must lie in [0, 1]")
        if self.kind == ParticipantKind.STORAGE:
            if not self.energy_min <= self.energy_initial <= self.energy_max:
                raise ValueError(f"{self.name}: initial energy outside [min, max]")
        if self.forecast is not None:
            self.forecast = np.asarray(self.forecast, dtype=float).ravel()
        if self.cost_quadratic < 0:
            raise ValueError(f"{self.name}: quadratic cost must be nonnegative")

    @property
    def is_flexibility_provider(self) -> bool:
        return self.kind in (ParticipantKind.FLEXIBLE, ParticipantKind.STORAGE)

    def r1_reserve_cost(self) -> float:
        # default reserve price: 20% of the linear energy price
        return self.reserve_cost if self.reserve_cost is not None else 0.2 * self.cost_linear

    def reserve_bound(self) -> float:
        """Symmetric reserve capability used by the LP benchmarks."""
        if self.kind == ParticipantKind.STORAGE:
            return min(self.charge_max, self.discharge_max)
        return min(self.reserve_up, self.reserve_down)

    def output_range(self, t: int) -> tuple[float, float]:
        """Dispatch range at hour t for the benchmark bin models."""
        if self.kind == ParticipantKind.WIND:
            return 0.0, float(self.forecast[t])
        if self.kind == ParticipantKind.STORAGE:
            return -self.charge_max / max(self.eta_charge, 1e-12), \
                self.eta_discharge * self.discharge_max
        if self.kind == ParticipantKind.CONSUMER:
            d = float(self.forecast[t])
            return -d, -d
        return self.q_min, self.q_max


class CouplingKind:
    LINEAR = "linear"
    RECOURSE_POLICY = "recourse_policy"
    UNCERTAINTY_SOURCE = "uncertainty_source"
    NONE = "none"


@dataclass
class Coupling:
    kind: str
    slot: int | None = None
    matrix: np.ndarray | None = None  # T x T, identity when omitted for LINEAR

    def linear_matrix(self, horizon: int) -> np.ndarray:
        if self.matrix is not None:
            return self.matrix
        return np.eye(horizon)


@dataclass
class ConicBid:
    name: str
    node: str
    slots_per_hour: int
    horizon: int
    soc_constraints: list[SocConstraint] = field(default_factory=list)
    eq_matrix: sp.csr_matrix | None = None
    eq_rhs: np.ndarray | None = None
    coupling: dict[int, Coupling] = field(default_factory=dict)  # commodity -> coupling
    cost_quadratic: np.ndarray = None  # (T, K)
    cost_linear: np.ndarray = None     # (T, K)
    cost_constant: float = 0.0
    source_index: int | None = None    # error-coordinate column for wind sources

    def __post_init__(self):
        nv = self.slots_per_hour * self.horizon
        if self.cost_quadratic is None:
            self.cost_quadratic = np.zeros((self.horizon, self.slots_per_hour))
        if self.cost_linear is None:
            self.cost_linear = np.zeros((self.horizon, self.slots_per_hour))
        self.cost_quadratic = np.asarray(self.cost_quadratic, dtype=float)
        self.cost_linear = np.asarray(self.cost_linear, dtype=float)
        if self.cost_quadratic.shape != (self.horizon, self.slots_per_hour):
            raise ValueError(f"{self.name}: quadratic cost shape mismatch")
        if np.any(self.cost_quadratic < 0):
            raise ValueError(f"{self.name}: quadratic costs must be nonnegative")
        for c in self.soc_constraints:
            if c.num_vars != nv:
                raise ValueError(f"{self.name}: constraint over {c.num_vars} vars, bid has {nv}")
        if self.eq_matrix is not None:
            self.eq_matrix = sp.csr_matrix(self.eq_matrix, dtype=float)
            self.eq_rhs = np.asarray(self.eq_rhs, dtype=float).ravel()
            if self.eq_matrix.shape != (self.eq_rhs.shape[0], nv):
                raise ValueError(f"{self.name}: equality block shape mismatch")
            if self.eq_matrix.shape[0]:
                rank = np.linalg.matrix_rank(self.eq_matrix.toarray(), tol=1e-10)
                if rank < self.eq_matrix.shape[0]:
                    raise ValueError(f"{self.name}: equality rows are rank deficient")

    @property
    def num_vars(self) -> int:
        return self.slots_per_hour * self.horizon

    def col(self, t: int, k: int) -> int:
        return t * self.slots_per_hour + k

    def num_eq(self) -> int:
        return 0 if self.eq_matrix is None else self.eq_matrix.shape[0]


def cost_recovery_precondition(bid: ConicBid) -> bool:
    """Theorem-4(ii) style check: homogeneous equalities and e >= ||b|| per SOC row."""
    if bid.num_eq() and np.any(np.abs(bid.eq_rhs) > 1e-12):
        return False
    for c in bid.soc_constraints:
        if c.e < float(np.linalg.norm(c.b)) - 1e-12:
            return False
    return True


def _sum_cols(nv, cols, sign=1.0):
    d = np.zeros(nv)
    for c in cols:
        d[c] += sign
    return d


def build_participant_bid(
    spec: ParticipantSpec,
    model: UncertaintyModel | None = None,
    r_factor: float | None = None,
    source_index: int | None = None,
) -> ConicBid:
    """Full per-participant bid with the uncertainty-aware SOC blocks.

    Flexible producers and storage carry two slots per hour (nominal dispatch
    and adjustment policy); wind and consumers carry one. ``r_factor`` is the
    safety factor shared by all of this bid's chance rows (computed by the
    assembler from the Bonferroni split); when omitted it is derived from the
    model's joint budget without splitting.
    """
    t_hor = model.horizon if model is not None else (
        len(spec.forecast) if spec.forecast is not None else None
    )
    if t_hor is None:
        raise ValueError(f"{spec.name}: cannot infer horizon")
    uncertain = model is not None and not np.allclose(model.covariance, 0.0)
    if uncertain and r_factor is None:
        r_factor = safety_factor(model.epsilon, model.safety_rule)
    r = r_factor if uncertain else 0.0

    if spec.kind == ParticipantKind.CONSUMER:
        return _consumer_bid(spec, t_hor)
    if spec.kind == ParticipantKind.WIND:
        return _wind_bid(spec, t_hor, model, source_index)
    if spec.kind == ParticipantKind.INFLEXIBLE:
        return _inflexible_bid(spec, t_hor)
    if spec.kind == ParticipantKind.FLEXIBLE:
        return _flexible_bid(spec, t_hor, model, r)
    return _storage_bid(spec, t_hor, model, r)


def _consumer_bid(spec, t_hor):
    k = 1
    nv = t_hor
    demand = spec.forecast
    if demand is None or len(demand) != t_hor:
        raise ValueError(f"{spec.name}: consumer needs a demand profile of length {t_hor}")
    eq = sp.identity(nv, format="csr")
    return ConicBid(
        name=spec.name, node=spec.node, slots_per_hour=k, horizon=t_hor,
        soc_constraints=[],
        eq_matrix=eq, eq_rhs=-demand,       # withdrawals are negative
        coupling={0: Coupling(CouplingKind.LINEAR, slot=0)},
    )


def _inflexible_bid(spec, t_hor):
    nv = t_hor
    cons = []
    for t in range(t_hor):
        d_up = np.zeros(nv); d_up[t] = -1.0
        cons.append(linear_to_soc(d_up, spec.q_max, nv, label=f"{spec.name}:cap_up:t{t}"))
        d_dn = np.zeros(nv); d_dn[t] = 1.0
        cons.append(linear_to_soc(d_dn, -spec.q_min, nv, label=f"{spec.name}:cap_dn:t{t}"))
    cq = np.full((t_hor, 1), spec.cost_quadratic)
    cl = np.full((t_hor, 1), spec.cost_linear)
    return ConicBid(
        name=spec.name, node=spec.node, slots_per_hour=1, horizon=t_hor,
        soc_constraints=cons, coupling={0: Coupling(CouplingKind.LINEAR, slot=0)},
        cost_quadratic=cq, cost_linear=cl,
    )


def _wind_bid(spec, t_hor, model, source_index):
    nv = t_hor
    cons = []
    for t in range(t_hor):
        d_up = np.zeros(nv); d_up[t] = -1.0
        cons.append(linear_to_soc(d_up, float(spec.forecast[t]), nv, label=f"{spec.name}:cap_up:t{t}"))
        d_dn = np.zeros(nv); d_dn[t] = 1.0
        cons.append(linear_to_soc(d_dn, 0.0, nv, label=f"{spec.name}:cap_dn:t{t}"))
    cq = np.full((t_hor, 1), spec.cost_quadratic)
    cl = np.full((t_hor, 1), spec.cost_linear)
    const = 0.0
    if model is not None and spec.cost_quadratic > 0 and source_index is not None:
        w = model.num_sources
        for t in range(t_hor):
            const += spec.cost_quadratic * model.covariance[w * t + source_index, w * t + source_index]
    return ConicBid(
        name=spec.name, node=spec.node, slots_per_hour=1, horizon=t_hor,
        soc_constraints=cons,
        coupling={0: Coupling(CouplingKind.LINEAR, slot=0),
                  1: Coupling(CouplingKind.UNCERTAINTY_SOURCE, slot=None)},
        cost_quadratic=cq, cost_linear=cl, cost_constant=const,
        source_index=source_index,
    )


def _policy_rows_capacity(spec, t_hor, model, r, nv, col_q, col_a, tag):
    """Per-hour nominal-versus-policy chance rows shared by flexible PPs and ESUs."""
    w = model.num_sources if model is not None else 0
    cons = []
    ones = np.ones(w)
    for t in range(t_hor):
        x_t = cholesky_block(model.covariance, [t], w) if w and r != 0.0 else np.zeros((w, w))
        weights = sp.csr_matrix((ones, (np.arange(w), np.full(w, col_a(t)))), shape=(w, nv))
        if spec.kind == ParticipantKind.FLEXIBLE:
            bounds = [
                (_unit(nv, col_q(t), 1.0), spec.q_max, "cap_up"),
                (_unit(nv, col_q(t), -1.0), -spec.q_min, "cap_dn"),
                (np.zeros(nv), spec.reserve_up, "res_up"),
                (np.zeros(nv), spec.reserve_down, "res_dn"),
            ]
        else:
            bounds = [
                (_unit(nv, col_q(t), 1.0), spec.eta_discharge * spec.discharge_max, "dis_cap"),
                (_unit(nv, col_q(t), -1.0), spec.charge_max / max(spec.eta_charge, 1e-12), "chg_cap"),
            ]
        for nominal, bound, tag2 in bounds:
            cons.append(
                chance_to_soc(nominal, weights, bound, x_t, None, r,
                              label=f"{spec.name}:{tag2}:t{t}")
            )
    return cons


def _unit(nv, col, val):
    d = np.zeros(nv)
    d[col] = val
    return d


def _flexible_bid(spec, t_hor, model, r):
    k = 2
    nv = k * t_hor
    col_q = lambda t: t * k
    col_a = lambda t: t * k + 1
    w = model.num_sources if model is not None else 0
    if model is None:
        raise ValueError(f"{spec.name}: flexible producers need an uncertainty model")
    cons = _policy_rows_capacity(spec, t_hor, model, r, nv, col_q, col_a, "flex")
    # ramp rows couple consecutive hours; tails of dimension 2W
    ones = np.ones(w)
    for t in range(1, t_hor):
        x_tt = cholesky_block(model.covariance, [t - 1, t], w) if w and r != 0.0 else np.zeros((2 * w, 2 * w))
        rows = np.arange(2 * w)
        cols = np.concatenate([np.full(w, col_a(t - 1)), np.full(w, col_a(t))])
        dn_weights = sp.csr_matrix(
            (np.concatenate([ones, -ones]), (rows, cols)), shape=(2 * w, nv)
        )
        # down: q_t - q_{t-1} >= -ramp_down  ->  (q_{t-1} - q_t) - ... <= ramp_down
        nominal = _unit(nv, col_q(t - 1), 1.0) + _unit(nv, col_q(t), -1.0)
        cons.append(chance_to_soc(nominal, dn_weights, spec.ramp_down, x_tt, None, r,
                                  label=f"{spec.name}:ramp_dn:t{t}"))
        up_weights = sp.csr_matrix(
            (np.concatenate([-ones, ones]), (rows, cols)), shape=(2 * w, nv)
        )
        nominal_up = -nominal
        cons.append(chance_to_soc(nominal_up, up_weights, spec.ramp_up, x_tt, None, r,
                                  label=f"{spec.name}:ramp_up:t{t}"))
    cq = np.zeros((t_hor, k))
    cl = np.zeros((t_hor, k))
    cq[:, 0] = spec.cost_quadratic
    cl[:, 0] = spec.cost_linear
    for t in range(t_hor):
        var_t = model.hourly_total_std(t) ** 2
        cq[t, 1] = spec.cost_quadratic * var_t   # variance-weighted policy cost
    return ConicBid(
        name=spec.name, node=spec.node, slots_per_hour=k, horizon=t_hor,
        soc_constraints=[c for c in cons],
        coupling={0: Coupling(CouplingKind.LINEAR, slot=0),
                  1: Coupling(CouplingKind.RECOURSE_POLICY, slot=1)},
        cost_quadratic=cq, cost_linear=cl,
    )


def _storage_bid(spec, t_hor, model, r):
    k = 2
    nv = k * t_hor
    col_q = lambda t: t * k
    col_g = lambda t: t * k + 1
    if model is None:
        raise ValueError(f"{spec.name}: storage needs an uncertainty model")
    w = model.num_sources
    cons = _policy_rows_capacity(spec, t_hor, model, r, nv, col_q, col_g, "esu")
    ones = np.ones(w)
    # energy window rows accumulate hours 0..t (tails of dimension W*(t+1))
    for t in range(t_hor):
        wt = w * (t + 1)
        x_1t = cholesky_block(model.covariance, range(t + 1), w) if w and r != 0.0 else np.zeros((wt, wt))
        rows = np.arange(wt)
        cols = np.concatenate([np.full(w, col_g(tt)) for tt in range(t + 1)])
        weights = sp.csr_matrix((np.tile(ones, t + 1), (rows, cols)), shape=(wt, nv))
        sum_q = _sum_cols(nv, [col_q(tt) for tt in range(t + 1)], -1.0)
        cons.append(chance_to_soc(sum_q, weights, spec.energy_max - spec.energy_initial,
                                  x_1t, None, r, label=f"{spec.name}:energy_up:t{t}"))
        cons.append(chance_to_soc(-sum_q, weights, spec.energy_initial - spec.energy_min,
                                  x_1t, None, r, label=f"{spec.name}:energy_dn:t{t}"))
        if t == t_hor - 1:
            cons.append(chance_to_soc(sum_q, weights, spec.band_above, x_1t, None, r,
                                      label=f"{spec.name}:eoh_up"))
            cons.append(chance_to_soc(-sum_q, weights, spec.band_below, x_1t, None, r,
                                      label=f"{spec.name}:eoh_dn"))
    cq = np.zeros((t_hor, k))
    cl = np.zeros((t_hor, k))
    cq[:, 0] = spec.cost_quadratic
    cl[:, 0] = spec.cost_linear
    for t in range(t_hor):
        cq[t, 1] = spec.cost_quadratic * model.hourly_total_std(t) ** 2
    return ConicBid(
        name=spec.name, node=spec.node, slots_per_hour=k, horizon=t_hor,
        soc_constraints=cons,
        coupling={0: Coupling(CouplingKind.LINEAR, slot=0),
                  1: Coupling(CouplingKind.RECOURSE_POLICY, slot=1)},
        cost_quadratic=cq, cost_linear=cl,
    )


def count_chance_inequalities(specs: list[ParticipantSpec], num_lines: int, t_hor: int) -> int:
    """Reformulated SOC inequality count for the Bonferroni split.

    Counts every participant chance row (capacity, reserve, ramp, storage
    power/energy/end-of-horizon) plus both directions of every line-hour
    network constraint.
    """
    n = 2 * num_lines * t_hor
    for s in specs:
        if s.kind == ParticipantKind.FLEXIBLE:
            n += 4 * t_hor + 2 * (t_hor - 1)
        elif s.kind == ParticipantKind.STORAGE:
            n += 2 * t_hor + 2 * t_hor + 2
    return n
