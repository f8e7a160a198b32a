"""Model comparison, predictive checks, curve bands, EC_x and the per-alive baseline.

Also holds the simulator used to generate bioassays from a known model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .dataset import (
    ReproductionRecord,
    SurvivalSeries,
    compute_nid,
)
from .inference import ChainSet, natural_loglik, percentiles, to_internal, to_natural
from .model import CurveParams, Family, ModelSpec, sample_counts, sample_rates

__all__ = [
    "DicResult",
    "PredictionInterval",
    "CurveBand",
    "EcxEstimate",
    "PerAliveEstimate",
    "PerAliveResult",
    "Design",
    "AnalysisError",
    "dic",
    "deviance",
    "posterior_predictive",
    "coverage",
    "curve_band",
    "ec_x",
    "ecx_posterior",
    "per_alive_fit",
    "simulate_dataset",
    "CHLORDAN_DESIGN",
]

log = logging.getLogger(__name__)


class AnalysisError(ValueError):
    pass


# -- DIC ----------------------------------------------------------------------


@dataclass(frozen=True)
class DicResult:
    dic: float
    p_d: float
    mean_deviance: float
    deviance_at_mean: float


def deviance(chains_or_draws, data, family=None, chunk: int = 20_000) -> np.ndarray:
    """``-2 log L`` for each pooled natural-scale draw."""
    if isinstance(chains_or_draws, ChainSet):
        family, draws = chains_or_draws.family, chains_or_draws.pooled()
    else:
        family, draws = Family(family), np.atleast_2d(np.asarray(chains_or_draws, dtype=float))
    out = np.empty(len(draws))
    for start in range(0, len(draws), chunk):
        out[start : start + chunk] = -2.0 * natural_loglik(family, draws[start : start + chunk], data)
    return out


def dic(chains: ChainSet, data) -> DicResult:
    """Deviance information criterion from the marginal likelihood.

    The plug-in point is the pooled posterior mean on the sampling scale
    ``(d, log e, log10 b[, log10 omega])``.
    """
    mean_dev = float(deviance(chains, data).mean())
    center = to_natural(chains.internal().mean(axis=0))
    dev_hat = float(deviance(center[None], data, chains.family)[0])
    p_d = mean_dev - dev_hat
    return DicResult(dic=mean_dev + p_d, p_d=p_d, mean_deviance=mean_dev, deviance_at_mean=dev_hat)


# -- posterior predictive check -----------------------------------------------


@dataclass(frozen=True)
class PredictionInterval:
    replicate_id: str
    concentration: float
    nid: float
    observed: int
    level: float
    lower: int
    upper: int
    median_pred: int
    covered: bool


def _curve_values(draws: np.ndarray, conc) -> np.ndarray:
    """``f(C)`` for every draw (rows) and concentration (columns)."""
    d = draws[:, 0:1]
    e = draws[:, 1:2]
    b = 10.0 ** draws[:, 2:3]
    with np.errstate(divide="ignore"):
        z = b * np.log(np.asarray(conc, dtype=float)[None, :] / e)
    return d * np.exp(-np.logaddexp(0.0, z))


def _omega_column(draws: np.ndarray, family: Family):
    return 10.0 ** draws[:, 3:4] if family.has_omega else None


def predictive_counts(chains: ChainSet, data, n_draws: int = 5000, seed=0) -> np.ndarray:
    """Replicated counts, shape ``(n_draws, n_replicates)``.

    Each row uses one posterior draw; NegBin rows get a fresh gamma rate per replicate.
    """
    rng = np.random.default_rng(seed)
    pooled = chains.pooled()
    rows = pooled[rng.integers(0, len(pooled), size=n_draws)]
    f = _curve_values(rows, data.concentrations)
    return sample_counts(f, data.nids[None, :], _omega_column(rows, chains.family), chains.family, rng)


def posterior_predictive(
    chains: ChainSet, data, n_draws: int = 5000, seed=0, levels: Sequence[float] = (0.95, 0.5)
) -> list[PredictionInterval]:
    """Prediction intervals for every replicate at each level.

    Interval ends are order statistics of the simulated counts (inverse-ECDF
    percentiles), so they are attainable integers.
    """
    sims = predictive_counts(chains, data, n_draws, seed)
    out = []
    for level in levels:
        tail = (1.0 - level) / 2.0
        lo, med, hi = np.quantile(sims, [tail, 0.5, 1.0 - tail], axis=0, method="inverted_cdf")
        for i, rep in enumerate(data.replicates):
            n = rep.n_offspring
            out.append(
                PredictionInterval(
                    replicate_id=rep.replicate_id,
                    concentration=rep.concentration,
                    nid=rep.nid,
                    observed=n,
                    level=level,
                    lower=int(lo[i]),
                    upper=int(hi[i]),
                    median_pred=int(med[i]),
                    covered=bool(lo[i] <= n <= hi[i]),
                )
            )
    return out


def coverage(intervals: Sequence[PredictionInterval], level: float | None = None) -> float:
    """Percentage of intervals containing their observation."""
    if level is not None:
        intervals = [iv for iv in intervals if math.isclose(iv.level, level)]
    if not intervals:
        raise AnalysisError("no prediction intervals")
    return 100.0 * sum(iv.covered for iv in intervals) / len(intervals)


# -- exposure-response band ---------------------------------------------------


@dataclass(frozen=True)
class CurveBand:
    concentrations: np.ndarray
    q025: np.ndarray
    q50: np.ndarray
    q975: np.ndarray


def curve_band(
    chains: ChainSet, conc_range: tuple[float, float], n_points: int = 100, n_draws: int = 5000, seed=0
) -> CurveBand:
    """Quantiles of simulated replicate rates ``f_ij`` on a regular concentration grid."""
    lo, hi = conc_range
    grid = np.linspace(lo, hi, n_points)
    rng = np.random.default_rng(seed)
    pooled = chains.pooled()
    q = np.empty((3, n_points))
    for i, c in enumerate(grid):
        rows = pooled[rng.integers(0, len(pooled), size=n_draws)]
        f = _curve_values(rows, [c])[:, 0]
        omega = 10.0 ** rows[:, 3] if chains.family.has_omega else None
        f_ij = sample_rates(f, omega, chains.family, rng)
        q[:, i] = percentiles(f_ij)
    return CurveBand(grid, q[0], q[1], q[2])


# -- EC_x ---------------------------------------------------------------------


@dataclass(frozen=True)
class EcxEstimate:
    x: float
    point: float
    lower: float
    upper: float


def _check_x(x):
    if not 0 < x < 100:
        raise AnalysisError(f"x must lie in (0, 100), got {x}")


def ec_x(curve: CurveParams, x: float) -> float:
    """Concentration giving an x% reduction of the control rate."""
    _check_x(x)
    return curve.e * (x / (100.0 - x)) ** (1.0 / curve.b)


def ecx_draws(chains: ChainSet, x: float) -> np.ndarray:
    _check_x(x)
    pooled = chains.pooled()
    return pooled[:, 1] * (x / (100.0 - x)) ** (1.0 / 10.0 ** pooled[:, 2])


def ecx_posterior(chains: ChainSet, x: float) -> EcxEstimate:
    lo, med, hi = percentiles(ecx_draws(chains, x))
    return EcxEstimate(float(x), float(med), float(lo), float(hi))


# -- per-alive Gaussian baseline ----------------------------------------------


@dataclass(frozen=True)
class PerAliveEstimate:
    name: str
    estimate: float
    se: float
    lower: float
    upper: float

    @property
    def negative_lower_bound(self) -> bool:
        return self.lower < 0


@dataclass
class PerAliveResult:
    """Least-squares log-logistic fit to offspring per surviving parent."""

    params: dict
    ecx: list
    residual_sd: float
    n_used: int
    dropped: list = field(default_factory=list)
    covariance: np.ndarray | None = None


def _ll3(c, d, e, b):
    with np.errstate(divide="ignore", over="ignore"):
        return d / (1.0 + np.exp(b * np.log(c / e)))


def per_alive_fit(
    survival: Sequence[SurvivalSeries],
    repro: Sequence[ReproductionRecord],
    duration: float | None = None,
    ecx_levels: Sequence[float] = (10, 20, 50),
    level: float = 0.95,
) -> PerAliveResult:
    """Fit ``N / survivors`` with Gaussian errors; delta-method intervals.

    Replicates without survivors at the end are dropped with a warning.
    Interval lower bounds are reported as computed, negative values included.
    """
    by_id = {s.replicate_id: s for s in survival}
    conc, y, dropped = [], [], []
    for r in repro:
        s = by_id.get(r.replicate_id)
        if s is None:
            raise AnalysisError(f"replicate {r.replicate_id!r} has no survival series")
        if duration is not None and s.times[-1] != duration:
            raise AnalysisError(f"replicate {r.replicate_id!r}: last observation is not at t={duration:g}")
        if s.final_count == 0:
            dropped.append(r.replicate_id)
            continue
        conc.append(r.concentration)
        y.append(r.n_offspring / s.final_count)
    if dropped:
        log.warning("per-alive fit: %d replicates without survivors dropped (%s)", len(dropped), ", ".join(dropped))
    n = len(y)
    if n < 4:
        raise AnalysisError(f"per-alive fit needs at least 4 usable replicates, got {n}")
    conc = np.asarray(conc, dtype=float)
    y = np.asarray(y, dtype=float)

    positive = conc[conc > 0]
    if positive.size == 0:
        raise AnalysisError("per-alive fit needs positive concentrations")
    control = y[conc == conc.min()]
    p0 = [max(control.mean(), 1e-6), math.exp(np.log(positive).mean()), 1.0]
    try:
        popt, pcov = optimize.curve_fit(
            _ll3, conc, y, p0=p0, bounds=([1e-12, 1e-12 * positive.min(), 1e-3], [np.inf, np.inf, 1e3]),
            method="trf", x_scale="jac", ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=20_000,
        )
    except (RuntimeError, ValueError) as exc:
        raise AnalysisError(f"per-alive least-squares fit failed: {exc}") from exc
    if not np.all(np.isfinite(pcov)):
        pcov = np.full((3, 3), np.nan)
    dof = n - 3
    resid = y - _ll3(conc, *popt)
    sigma = math.sqrt(float(resid @ resid) / dof) if dof > 0 else float("nan")
    tq = stats.t.ppf(0.5 + level / 2, dof) if dof > 0 else float("nan")

    params = {}
    for i, name in enumerate(("d", "e", "b")):
        se = math.sqrt(pcov[i, i]) if pcov[i, i] >= 0 else float("nan")
        params[name] = PerAliveEstimate(name, float(popt[i]), se, popt[i] - tq * se, popt[i] + tq * se)

    d, e, b = popt
    ecx = []
    for x in ecx_levels:
        _check_x(x)
        ratio = x / (100.0 - x)
        value = e * ratio ** (1.0 / b)
        grad = np.array([0.0, ratio ** (1.0 / b), -value * math.log(ratio) / b**2])
        se = math.sqrt(max(float(grad @ pcov @ grad), 0.0))
        ecx.append(PerAliveEstimate(f"EC{x:g}", float(value), se, value - tq * se, value + tq * se))
    return PerAliveResult(params=params, ecx=ecx, residual_sd=sigma, n_used=n, dropped=dropped, covariance=pcov)


# -- simulation ---------------------------------------------------------------


@dataclass(frozen=True)
class Design:
    """Bioassay layout for simulation.

    ``mortality`` gives, per concentration, the probability that an animal
    dies before the end of the test; death times are uniform over the test
    and a dead animal is found at the next observation time.
    """

    concentrations: tuple[float, ...]
    replicates: int
    animals: int
    duration: float
    observation_times: tuple[float, ...] | None = None
    mortality: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "concentrations", tuple(float(c) for c in self.concentrations))
        if not self.concentrations or any(c < 0 for c in self.concentrations):
            raise ValueError("concentrations must be non-negative and non-empty")
        if self.replicates < 1 or self.animals < 1 or not self.duration > 0:
            raise ValueError("replicates, animals and duration must be positive")
        times = self.observation_times
        if times is None:
            times = tuple(float(t) for t in np.arange(0.0, self.duration, 1.0)) + (float(self.duration),)
        times = tuple(float(t) for t in times)
        if times[0] != 0 or times[-1] != self.duration or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("observation times must increase from 0 to the duration")
        object.__setattr__(self, "observation_times", times)
        mort = self.mortality
        if mort is None:
            mort = (0.0,) * len(self.concentrations)
        mort = tuple(float(m) for m in mort)
        if len(mort) != len(self.concentrations) or any(not 0 <= m <= 1 for m in mort):
            raise ValueError("mortality needs one probability in [0, 1] per concentration")
        object.__setattr__(self, "mortality", mort)


CHLORDAN_DESIGN = Design(concentrations=(0, 0.18, 0.73, 1.82, 2.9, 7), replicates=10, animals=1, duration=21)


def simulate_dataset(
    true_spec: ModelSpec, design: Design, seed=0
) -> tuple[list[SurvivalSeries], list[ReproductionRecord]]:
    """Simulate survival and reproduction tables from a known model."""
    rng = np.random.default_rng(seed)
    times = np.asarray(design.observation_times)
    family = true_spec.family
    omega = true_spec.stochastic.omega
    survival, repro = [], []
    for i, (c, m) in enumerate(zip(design.concentrations, design.mortality)):
        f = float(_curve_values(
            np.array([[true_spec.curve.d, true_spec.curve.e, math.log10(true_spec.curve.b)]]), [c]
        )[0, 0])
        for j in range(design.replicates):
            rid = f"c{i}r{j + 1}"
            dies = rng.random(design.animals) < m
            death = np.where(dies, rng.uniform(0.0, design.duration, design.animals), np.inf)
            alive = tuple(int((death > t).sum()) if t > 0 else design.animals for t in times)
            series = SurvivalSeries(rid, c, tuple(times.tolist()), alive)
            nid = compute_nid(series, design.duration)
            n = int(sample_counts(f, nid, omega, family, rng)) if nid > 0 else 0
            survival.append(series)
            repro.append(ReproductionRecord(rid, c, n))
    return survival, repro
