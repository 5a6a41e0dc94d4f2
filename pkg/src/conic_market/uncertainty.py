"""Forecast-error model: covariance blocks, safety factors, scenario sampling.

The error vector stacks W sources over T hours (source-major within each
hour: index w + W*t). Hourly blocks of the covariance capture cross-source
correlation; cross-hour blocks are supported and default to zero. Sampling
uses a counter-based generator keyed by (seed, scenario index) so parallel
generation is order-independent and reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri


class SafetyRule:
    GAUSSIAN = "gaussian_quantile"
    DISTRIBUTIONALLY_ROBUST = "distributionally_robust"


@dataclass
class UncertaintyModel:
    num_sources: int
    horizon: int
    covariance: np.ndarray          # (W*T) x (W*T), symmetric PSD
    epsilon: float = 0.05           # joint violation budget
    safety_rule: str = SafetyRule.GAUSSIAN
    mean: np.ndarray | None = None  # defaults to zero
    psd_repair: bool = False        # opt-in minimum-eigenvalue clipping

    def __post_init__(self):
        wt = self.num_sources * self.horizon
        self.covariance = np.asarray(self.covariance, dtype=float)
        if self.covariance.shape != (wt, wt):
            raise ValueError(f"covariance must be {wt}x{wt}")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if self.mean is None:
            self.mean = np.zeros(wt)
        else:
            self.mean = np.asarray(self.mean, dtype=float).ravel()
            if self.mean.shape[0] != wt:
                raise ValueError("mean length mismatch")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.safety_rule not in (SafetyRule.GAUSSIAN, SafetyRule.DISTRIBUTIONALLY_ROBUST):
            raise ValueError(f"unknown safety rule {self.safety_rule!r}")
        if self.psd_repair:
            w, v = np.linalg.eigh(self.covariance)
            self.covariance = (v * np.maximum(w, 1e-10)) @ v.T

    def hour_indices(self, hours) -> np.ndarray:
        """Flat error indices covering the given hours (source-major per hour)."""
        w = self.num_sources
        return np.concatenate([np.arange(w * t, w * (t + 1)) for t in hours])

    def block(self, hours) -> np.ndarray:
        idx = self.hour_indices(hours)
        return self.covariance[np.ix_(idx, idx)]

    def hourly_total_std(self, t: int) -> float:
        """Std of the hour-t total error 1'xi_t."""
        sig = self.block([t])
        return float(np.sqrt(np.ones(self.num_sources) @ sig @ np.ones(self.num_sources)))


def cholesky_block(covariance: np.ndarray, hour_range, num_sources: int | None = None) -> np.ndarray:
    """Lower-triangular factor of the principal block for the given hours.

    ``hour_range`` is an iterable of hour indices; with ``num_sources`` None
    the matrix is treated as a single block and hour_range ignored entirely.
    Raises naming the offending leading minor when the block is not PD.
    """
    cov = np.asarray(covariance, dtype=float)
    if num_sources is not None:
        hours = list(hour_range)
        idx = np.concatenate([np.arange(num_sources * t, num_sources * (t + 1)) for t in hours])
        cov = cov[np.ix_(idx, idx)]
    if cov.size == 0:
        return cov.reshape(0, 0)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        # locate the first failing leading minor for the error message
        for k in range(1, cov.shape[0] + 1):
            try:
                np.linalg.cholesky(cov[:k, :k])
            except np.linalg.LinAlgError:
                raise ValueError(
                    f"covariance block is not positive definite: leading minor of order {k}"
                ) from None
        raise


def safety_factor(eps_hat: float, rule: str = SafetyRule.GAUSSIAN) -> float:
    """Safety factor: Gaussian quantile or the moment-based robust bound."""
    if not 0.0 < eps_hat < 1.0:
        raise ValueError(f"violation probability must be in (0, 1), got {eps_hat}")
    if rule == SafetyRule.GAUSSIAN:
        return float(ndtri(1.0 - eps_hat))
    if rule == SafetyRule.DISTRIBUTIONALLY_ROBUST:
        return float(np.sqrt((1.0 - eps_hat) / eps_hat))
    raise ValueError(f"unknown safety rule {rule!r}")


def bonferroni_split(epsilon: float, n_ineq: int) -> np.ndarray:
    """Uniform split of the joint budget over n individual constraints."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must be in (0, 1)")
    if n_ineq < 1:
        raise ValueError("need at least one inequality")
    return np.full(n_ineq, epsilon / n_ineq)


@dataclass
class ScenarioSet:
    samples: np.ndarray       # K x (W*T)
    seed: int
    generator_tag: str = "philox-per-index"
    num_sources: int | None = None
    horizon: int | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("scenario samples must be finite")

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    def scenario_matrix(self, k: int, num_sources: int, horizon: int) -> np.ndarray:
        """Scenario k as a W x T matrix."""
        return self.samples[k].reshape(horizon, num_sources).T

    def hourly_totals(self) -> np.ndarray:
        """K x T totals 1'xi_t per scenario and hour."""
        w = self.num_sources
        t = self.horizon
        if w is None or t is None:
            raise ValueError("scenario set lacks shape metadata")
        return self.samples.reshape(self.count, t, w).sum(axis=2)

    def to_csv(self, path: str) -> None:
        w, t = self.num_sources, self.horizon
        if w is None or t is None:
            raise ValueError("scenario set lacks shape metadata")
        header = ",".join(f"w{i}_t{tt}" for tt in range(t) for i in range(w))
        with open(path, "w") as f:
            f.write(header + "\n")
            for row in self.samples:
                f.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path: str, seed: int = -1) -> "ScenarioSet":
        with open(path) as f:
            header = f.readline().strip().split(",")
            rows = [[float(v) for v in line.strip().split(",")] for line in f if line.strip()]
        w = 1 + max(int(h.split("_")[0][1:]) for h in header)
        t = 1 + max(int(h.split("_")[1][1:]) for h in header)
        return cls(np.array(rows), seed=seed, num_sources=w, horizon=t)


def _scenario_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, index]))


def sample_scenarios(model: UncertaintyModel, count: int, seed: int) -> ScenarioSet:
    """K i.i.d. draws xi = mu + X z, X the Cholesky factor, z standard normal.

    Draw k depends only on (seed, k), so any parallel split of the index
    range reproduces the same set.
    """
    wt = model.num_sources * model.horizon
    if np.allclose(model.covariance, 0.0):
        x = np.zeros((wt, wt))
    else:
        x = cholesky_block(model.covariance, None)
    out = np.empty((count, wt))
    for k in range(count):
        z = _scenario_stream(seed, k).standard_normal(wt)
        out[k] = model.mean + x @ z
    return ScenarioSet(
        out, seed=seed, num_sources=model.num_sources, horizon=model.horizon
    )


def estimate_hourly_model(
    samples: ScenarioSet,
    epsilon: float,
    safety_rule: str = SafetyRule.GAUSSIAN,
    shrinkage: float = 1e-8,
) -> UncertaintyModel:
    """Moment estimation with the default correlation structure (per-hour blocks).

    Cross-hour correlation is zeroed: K historical samples cannot identify a
    full (W*T)^2 covariance. A small diagonal shrinkage keeps blocks PD.
    """
    w, t = samples.num_sources, samples.horizon
    data = samples.samples
    cov = np.zeros((w * t, w * t))
    for tt in range(t):
        blk = data[:, w * tt: w * (tt + 1)]
        c = np.cov(blk, rowvar=False, bias=False).reshape(w, w)
        cov[w * tt: w * (tt + 1), w * tt: w * (tt + 1)] = c + shrinkage * np.eye(w)
    return UncertaintyModel(
        num_sources=w, horizon=t, covariance=cov, epsilon=epsilon, safety_rule=safety_rule
    )


def scenario_digest(samples: ScenarioSet) -> str:
    h = hashlib.sha256()
    h.update(samples.samples.tobytes())
    return h.hexdigest()[:16]
