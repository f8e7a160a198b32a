"""Priors, adaptive random-walk Metropolis, convergence diagnostics and MLE.

Sampling happens on the internal vector ``(d, log e, log10 b[, log10 omega])``.
The lognormal prior on ``e`` becomes a normal density on ``log e`` (the
Jacobian term), the other priors are uniform on their own scale. Stored
draws are reported on the natural scale ``(d, e, log10 b[, log10 omega])``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .model import Family, loglik_and_grad_arrays, loglik_arrays

__all__ = [
    "PARAM_NAMES",
    "Uniform",
    "LogNormal",
    "GammaPrior",
    "PriorSpec",
    "SamplerConfig",
    "Chain",
    "ChainSet",
    "ParamSummary",
    "PosteriorSummary",
    "MleResult",
    "InferenceError",
    "calibrate_priors",
    "log_posterior",
    "run_chain",
    "run_mcmc",
    "gelman_rubin",
    "effective_sample_size",
    "posterior_summary",
    "mle_fit",
]

log = logging.getLogger(__name__)

PARAM_NAMES = ("d", "e", "log10_b", "log10_omega")
Z975 = 1.959964
MAX_STORED_DRAWS = 100_000


class InferenceError(RuntimeError):
    pass


# -- priors -------------------------------------------------------------------


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def logpdf(self, x: float) -> float:
        if self.lo < x < self.hi:
            return -math.log(self.hi - self.lo)
        return -math.inf

    def sample(self, rng):
        return rng.uniform(self.lo, self.hi)

    def contains(self, x) -> np.ndarray:
        return (np.asarray(x) > self.lo) & (np.asarray(x) < self.hi)


@dataclass(frozen=True)
class LogNormal:
    meanlog: float
    sdlog: float

    def __post_init__(self):
        if not self.sdlog > 0:
            raise ValueError("sdlog must be positive")

    def logpdf(self, x: float) -> float:
        if not x > 0:
            return -math.inf
        z = (math.log(x) - self.meanlog) / self.sdlog
        return -0.5 * z * z - math.log(self.sdlog * x) - 0.5 * math.log(2 * math.pi)

    def sample(self, rng):
        return math.exp(rng.normal(self.meanlog, self.sdlog))

    def contains(self, x) -> np.ndarray:
        return np.asarray(x) > 0


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate); not one of the default priors, useful for conjugate checks."""

    shape: float
    rate: float

    def logpdf(self, x: float) -> float:
        if not x > 0:
            return -math.inf
        return self.shape * math.log(self.rate) - math.lgamma(self.shape) + (self.shape - 1) * math.log(x) - self.rate * x

    def sample(self, rng):
        return rng.gamma(self.shape, 1.0 / self.rate)

    def contains(self, x) -> np.ndarray:
        return np.asarray(x) > 0


@dataclass(frozen=True)
class PriorSpec:
    e_prior: LogNormal
    d_prior: Uniform | GammaPrior = Uniform(0.0, 20.0)
    log10b_prior: Uniform = Uniform(-2.0, 2.0)
    log10omega_prior: Uniform = Uniform(-4.0, 4.0)

    def log_density(self, z, family: Family) -> float:
        """Log prior density of the internal vector (includes the log-e Jacobian)."""
        e = math.exp(z[1])
        lp = self.d_prior.logpdf(z[0]) + self.e_prior.logpdf(e) + z[1] + self.log10b_prior.logpdf(z[2])
        if family.has_omega:
            lp += self.log10omega_prior.logpdf(z[3])
        return lp

    def sample(self, rng, family: Family) -> np.ndarray:
        z = [self.d_prior.sample(rng), math.log(self.e_prior.sample(rng)), self.log10b_prior.sample(rng)]
        if family.has_omega:
            z.append(self.log10omega_prior.sample(rng))
        return np.array(z)

    def contains(self, draws: np.ndarray, family: Family) -> np.ndarray:
        """Row-wise support check for natural-scale draws."""
        ok = self.d_prior.contains(draws[:, 0]) & self.e_prior.contains(draws[:, 1]) & self.log10b_prior.contains(draws[:, 2])
        if family.has_omega:
            ok &= self.log10omega_prior.contains(draws[:, 3])
        return ok


def calibrate_priors(data) -> PriorSpec:
    """Lognormal prior on e with 95% mass between the extreme positive tested concentrations."""
    positive = np.unique(data.concentrations[data.concentrations > 0])
    if positive.size < 2:
        raise InferenceError("prior calibration needs at least two distinct positive concentrations")
    lo, hi = math.log(positive[0]), math.log(positive[-1])
    return PriorSpec(LogNormal((lo + hi) / 2, (hi - lo) / (2 * Z975)))


# -- posterior ----------------------------------------------------------------


def to_natural(z: np.ndarray) -> np.ndarray:
    """Internal ``(d, log e, ...)`` rows to ``(d, e, ...)``."""
    out = np.array(z, dtype=float, copy=True)
    out[..., 1] = np.exp(out[..., 1])
    return out


def to_internal(x: np.ndarray) -> np.ndarray:
    out = np.array(x, dtype=float, copy=True)
    out[..., 1] = np.log(out[..., 1])
    return out


def natural_loglik(family: Family, x: np.ndarray, data) -> np.ndarray:
    """Log-likelihood of natural-scale parameter rows (vectorized)."""
    x = np.asarray(x, dtype=float)
    omega = 10.0 ** x[..., 3] if family.has_omega else None
    return loglik_arrays(
        family, x[..., 0], x[..., 1], 10.0 ** x[..., 2], omega, data.concentrations, data.counts, data.nids
    )


def log_posterior(params, priors: PriorSpec, family, data) -> float:
    """Unnormalized log posterior at internal parameters ``(d, log e, log10 b[, log10 omega])``.

    Returns ``-inf`` outside the prior support.
    """
    family = Family(family)
    z = np.asarray(params, dtype=float)
    lp = priors.log_density(z, family)
    if not math.isfinite(lp):
        return -math.inf
    ll = float(natural_loglik(family, to_natural(z), data))
    if math.isnan(ll):
        return -math.inf
    return lp + ll


# -- sampler ------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 3
    pilot_iterations: int = 5000
    pilot_burnin: int = 5000
    target_ess: int = 4000
    rhat_threshold: float = 1.05
    seed: int = 0
    max_iterations: int = 500_000
    max_stored: int = MAX_STORED_DRAWS
    n_workers: int | None = None

    def __post_init__(self):
        for name in ("n_chains", "pilot_iterations", "pilot_burnin", "target_ess", "max_iterations", "max_stored"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_chains < 2:
            raise ValueError("at least two chains are needed for convergence diagnostics")


@dataclass
class Chain:
    """Output of one Metropolis run. ``draws`` are natural-scale."""

    draws: np.ndarray
    log_post: np.ndarray
    acceptance_rate: float
    proposal_cov: np.ndarray
    last_z: np.ndarray
    last_log_post: float
    thin: int = 1


def _initial_cov(priors: PriorSpec, family: Family) -> np.ndarray:
    sd = [1.0, priors.e_prior.sdlog, 0.4, 0.8]
    return np.diag(np.square(sd[: family.n_params]) * 0.01)


def _chol(cov: np.ndarray) -> np.ndarray:
    k = cov.shape[0]
    jitter = 1e-12 * max(np.trace(cov) / k, 1e-12)
    for _ in range(10):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(k))
        except np.linalg.LinAlgError:
            jitter *= 100
    return np.diag(np.sqrt(np.maximum(np.diag(cov), 1e-12)))


def run_chain(
    family,
    data,
    priors: PriorSpec,
    config: SamplerConfig,
    chain_seed,
    n_burnin: int | None = None,
    n_iterations: int | None = None,
    thin: int = 1,
    start: np.ndarray | None = None,
    proposal_cov: np.ndarray | None = None,
) -> Chain:
    """Random-walk Metropolis with a Gaussian proposal.

    During the ``n_burnin`` iterations the proposal covariance is tuned
    every 50 iterations: a global scale follows the batch acceptance rate
    towards 0.3, and the shape follows the empirical covariance of the second
    half of the burn-in so far. After burn-in the kernel is fixed.
    Defaults to the pilot lengths of ``config``.
    """
    family = Family(family)
    n_burnin = config.pilot_burnin if n_burnin is None else n_burnin
    n_iterations = config.pilot_iterations if n_iterations is None else n_iterations
    rng = np.random.default_rng(chain_seed)
    k = family.n_params

    def lpost(z):
        return log_posterior(z, priors, family, data)

    if start is None:
        for _ in range(100):
            z = priors.sample(rng, family)
            lp = lpost(z)
            if math.isfinite(lp):
                break
        else:
            raise InferenceError("no finite log-posterior found in 100 draws from the prior")
    else:
        z = np.array(start, dtype=float)
        lp = lpost(z)
        if not math.isfinite(lp):
            raise InferenceError("non-finite log-posterior at the supplied starting point")

    cov = _initial_cov(priors, family) if proposal_cov is None else np.array(proposal_cov, dtype=float)
    chol = _chol(cov)

    # burn-in with adaptation
    batch = 50
    log_scale = 0.0
    history = np.empty((n_burnin, k))
    accepted_batch = 0
    base_cov = cov
    for i in range(n_burnin):
        prop = z + chol @ rng.standard_normal(k)
        lp_prop = lpost(prop)
        if math.log(rng.random()) < lp_prop - lp:
            z, lp = prop, lp_prop
            accepted_batch += 1
        history[i] = z
        if (i + 1) % batch == 0:
            rate = accepted_batch / batch
            accepted_batch = 0
            n_batch = (i + 1) // batch
            log_scale += (rate - 0.3) * 3.0 / math.sqrt(n_batch)
            if i + 1 >= 4 * batch:
                recent = history[(i + 1) // 2 : i + 1]
                emp = np.cov(recent, rowvar=False)
                if np.all(np.isfinite(emp)) and np.trace(emp) > 0:
                    base_cov = (2.38**2 / k) * emp
            chol = _chol(math.exp(2 * log_scale) * base_cov)
    if n_burnin:
        cov = math.exp(2 * log_scale) * base_cov
        chol = _chol(cov)

    # fixed kernel
    n_keep = n_iterations // thin
    draws = np.empty((n_keep, k))
    lps = np.empty(n_keep)
    accepted = 0
    for i in range(n_iterations):
        prop = z + chol @ rng.standard_normal(k)
        lp_prop = lpost(prop)
        if math.log(rng.random()) < lp_prop - lp:
            z, lp = prop, lp_prop
            accepted += 1
        if (i + 1) % thin == 0 and (i + 1) // thin <= n_keep:
            j = (i + 1) // thin - 1
            draws[j] = z
            lps[j] = lp
    return Chain(
        draws=to_natural(draws),
        log_post=lps,
        acceptance_rate=accepted / n_iterations if n_iterations else float("nan"),
        proposal_cov=cov,
        last_z=z.copy(),
        last_log_post=lp,
        thin=thin,
    )


@dataclass
class ChainSet:
    """Post-burn-in draws, shape ``(n_chains, n_draws, n_params)``, natural scale."""

    family: Family
    draws: np.ndarray
    thin: int = 1
    n_iterations: int = 0
    acceptance_rates: tuple[float, ...] = ()
    pilot_ess: dict = field(default_factory=dict)

    def __post_init__(self):
        self.family = Family(self.family)
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 3 or self.draws.shape[2] != self.family.n_params:
            raise ValueError(f"draws must have shape (chains, draws, {self.family.n_params})")

    @property
    def param_names(self) -> tuple[str, ...]:
        return PARAM_NAMES[: self.family.n_params]

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def internal(self) -> np.ndarray:
        """Pooled draws on the internal scale."""
        return to_internal(self.pooled())

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.param_names.index(name)]

    @classmethod
    def from_draws(cls, family, draws) -> "ChainSet":
        """Wrap arbitrary natural-scale draws, e.g. a single point repeated."""
        draws = np.asarray(draws, dtype=float)
        if draws.ndim == 2:
            draws = draws[None]
        return cls(Family(family), draws)


def _worker_count(config: SamplerConfig) -> int:
    if config.n_workers is not None:
        return max(1, config.n_workers)
    try:
        return max(1, int(os.environ.get("REPROFIT_THREADS", "1")))
    except ValueError:
        return 1


def _chain_task(args):
    kind, family, data, priors, config, seed, kwargs = args
    return run_chain(family, data, priors, config, seed, **kwargs)


def _map(tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            return list(pool.map(_chain_task, tasks))
    return [_chain_task(t) for t in tasks]


def chain_seeds(seed, n_chains: int):
    """Per-chain (pilot, main) seed sequences derived from the master seed."""
    root = np.random.SeedSequence(seed)
    return [child.spawn(2) for child in root.spawn(n_chains)]


def required_iterations(pilot_draws: np.ndarray, target_ess: float) -> tuple[int, dict]:
    """Smallest per-chain run length whose projected pooled ESS reaches ``target_ess``.

    ``pilot_draws`` has shape (chains, iterations, params) on the internal scale.
    """
    m, n, k = pilot_draws.shape
    ess = {}
    worst = math.inf
    for j in range(k):
        pooled = sum(effective_sample_size(pilot_draws[c, :, j]) for c in range(m))
        ess[PARAM_NAMES[j]] = pooled
        worst = min(worst, pooled)
    per_iteration = worst / n
    return int(math.ceil(target_ess / per_iteration)), ess


def run_mcmc(family, data, priors: PriorSpec, config: SamplerConfig) -> ChainSet:
    """Pilot run, ESS-based run-length choice, then the main run.

    Each chain keeps its adapted proposal and continues from its pilot end
    point; the main run is thinned so at most ``config.max_stored`` draws
    per chain are stored.
    """
    family = Family(family)
    seeds = chain_seeds(config.seed, config.n_chains)
    workers = _worker_count(config)
    pilot = _map([("pilot", family, data, priors, config, s[0], {}) for s in seeds], workers)

    pilot_internal = np.stack([to_internal(c.draws) for c in pilot])
    n_main, ess = required_iterations(pilot_internal, config.target_ess)
    n_main = min(max(n_main, config.pilot_iterations), config.max_iterations)
    thin = max(1, math.ceil(n_main / config.max_stored))
    n_main = (n_main // thin) * thin

    tasks = [
        (
            "main", family, data, priors, config, s[1],
            dict(n_burnin=0, n_iterations=n_main, thin=thin, start=c.last_z, proposal_cov=c.proposal_cov),
        )
        for s, c in zip(seeds, pilot)
    ]
    main = _map(tasks, workers)
    log.info("%s: main run %d iterations/chain, thin %d", family.label, n_main, thin)
    return ChainSet(
        family=family,
        draws=np.stack([c.draws for c in main]),
        thin=thin,
        n_iterations=n_main,
        acceptance_rates=tuple(c.acceptance_rate for c in main),
        pilot_ess=ess,
    )


# -- diagnostics --------------------------------------------------------------


def _as_chain_array(chains) -> np.ndarray:
    if isinstance(chains, ChainSet):
        return chains.draws
    x = np.asarray(chains, dtype=float)
    return x[..., None] if x.ndim == 2 else x


def gelman_rubin(chains) -> np.ndarray:
    """Potential scale reduction factor per parameter, Brooks-Gelman corrected.

    Takes a ChainSet or an array ``(chains, draws[, params])``. Follows the
    df-adjusted point estimate ``sqrt((df+3)/(df+1) * V/W)``. Parameters whose
    within-chain variance is zero are returned as NaN (not computable).
    """
    x = _as_chain_array(chains)
    m, n, k = x.shape
    if m < 2 or n < 2:
        raise ValueError("need at least 2 chains of length >= 2")
    out = np.full(k, np.nan)
    for j in range(k):
        s2 = x[:, :, j].var(axis=1, ddof=1)
        xbar = x[:, :, j].mean(axis=1)
        w = s2.mean()
        if not w > 0:
            continue
        b = n * xbar.var(ddof=1)
        muhat = xbar.mean()
        var_w = s2.var(ddof=1) / m
        var_b = 2 * b**2 / (m - 1)
        cov_s2_x2 = np.cov(s2, xbar**2, ddof=1)[0, 1]
        cov_s2_x = np.cov(s2, xbar, ddof=1)[0, 1]
        cov_wb = (n / m) * (cov_s2_x2 - 2 * muhat * cov_s2_x)
        v = (n - 1) / n * w + (1 + 1 / m) * b / n
        var_v = ((n - 1) ** 2 * var_w + (1 + 1 / m) ** 2 * var_b + 2 * (n - 1) * (1 + 1 / m) * cov_wb) / n**2
        df_adj = (2 * v**2 / var_v + 3) / (2 * v**2 / var_v + 1) if var_v > 0 else 1.0
        out[j] = math.sqrt(df_adj * v / w)
    return out


def effective_sample_size(draws) -> float:
    """ESS of one chain by Geyer's initial positive sequence.

    A constant chain yields 1.
    """
    x = np.asarray(draws, dtype=float)
    n = x.size
    if n < 10:
        raise ValueError("need at least 10 draws")
    x = x - x.mean()
    if not np.any(x):
        return 1.0
    nfft = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(spec * np.conj(spec), nfft)[:n] / n
    if not acov[0] > 0:
        return 1.0
    rho = acov / acov[0]
    m = (n - 1) // 2
    pairs = rho[0 : 2 * m : 2] + rho[1 : 2 * m + 1 : 2]
    nonpos = np.flatnonzero(pairs <= 0)
    stop = nonpos[0] if nonpos.size else pairs.size
    tau = -1.0 + 2.0 * pairs[:stop].sum()
    return float(n / max(tau, 1.0 / n))


# -- summaries ----------------------------------------------------------------


@dataclass(frozen=True)
class ParamSummary:
    median: float
    q025: float
    q975: float
    rhat: float
    ess: float


@dataclass(frozen=True)
class PosteriorSummary:
    family: Family
    params: dict

    def __getitem__(self, name) -> ParamSummary:
        return self.params[name]

    def converged(self, threshold: float = 1.05) -> bool:
        return all(np.isfinite(p.rhat) and p.rhat < threshold for p in self.params.values())


def percentiles(x, qs=(2.5, 50.0, 97.5)) -> np.ndarray:
    """Percentiles with linear interpolation between order statistics."""
    return np.percentile(np.asarray(x, dtype=float), qs, method="linear")


def posterior_summary(chains: ChainSet) -> PosteriorSummary:
    if chains.draws.size == 0:
        raise ValueError("empty chain set")
    pooled = chains.pooled()
    can_diagnose = chains.n_chains >= 2 and chains.draws.shape[1] >= 10
    rhat = gelman_rubin(chains) if can_diagnose else np.full(pooled.shape[1], np.nan)
    out = {}
    for j, name in enumerate(chains.param_names):
        lo, med, hi = percentiles(pooled[:, j])
        ess = (
            sum(effective_sample_size(chains.draws[c, :, j]) for c in range(chains.n_chains))
            if chains.draws.shape[1] >= 10
            else float("nan")
        )
        out[name] = ParamSummary(float(med), float(lo), float(hi), float(rhat[j]), float(ess))
    return PosteriorSummary(chains.family, out)


# -- maximum likelihood -------------------------------------------------------


@dataclass(frozen=True)
class MleResult:
    family: Family
    params: dict
    u: np.ndarray
    loglik: float
    gradient: np.ndarray
    converged: bool
    n_converged: int


def _mle_bounds(data, family: Family):
    positive = data.concentrations[data.concentrations > 0]
    lo = math.log(positive.min()) if positive.size else 0.0
    hi = math.log(positive.max()) if positive.size else 0.0
    bounds = [(math.log(1e-8), math.log(1e4)), (lo - 12.0, hi + 12.0), (-4.0, 4.0)]
    if family.has_omega:
        bounds.append((-12.0, 6.0))
    return bounds


def mle_fit(family, data, n_restarts: int = 10, seed: int = 0, priors: PriorSpec | None = None) -> MleResult:
    """Quasi-Newton maximization of the log-likelihood from prior-drawn starts.

    Works on ``(log d, log e, log10 b[, log10 omega])``; returned ``params``
    are natural (``d``, ``e``, ``b``, ``omega``).
    """
    family = Family(family)
    if priors is None:
        priors = calibrate_priors(data)
    rng = np.random.default_rng(seed)
    bounds = _mle_bounds(data, family)
    conc, counts, nids = data.concentrations, data.counts, data.nids

    def objective(u):
        ll, g = loglik_and_grad_arrays(family, u, conc, counts, nids)
        if not np.isfinite(ll):
            return 1e300, np.zeros_like(u)
        return -ll, -g

    best = None
    n_ok = 0
    for _ in range(n_restarts):
        z = priors.sample(rng, family)
        u0 = np.array([math.log(max(z[0], 1e-3)), z[1], z[2]] + ([z[3]] if family.has_omega else []))
        u0 = np.clip(u0, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            res = optimize.minimize(
                objective, u0, jac=True, method="L-BFGS-B", bounds=bounds,
                options=dict(maxiter=2000, ftol=1e-15, gtol=1e-10),
            )
        except (FloatingPointError, ValueError):
            continue
        if not np.isfinite(res.fun) or res.fun >= 1e300:
            continue
        ok = bool(res.success)
        n_ok += ok
        if best is None or (ok, -res.fun) > (best[1], -best[0].fun):
            best = (res, ok)
    if best is None or n_ok == 0:
        raise InferenceError(f"{family.label}: all {n_restarts} maximum-likelihood restarts failed")
    res = best[0]
    u = res.x
    ll, g = loglik_and_grad_arrays(family, u, conc, counts, nids)
    params = {"d": math.exp(u[0]), "e": math.exp(u[1]), "b": 10 ** u[2]}
    params["omega"] = 10 ** u[3] if family.has_omega else None
    return MleResult(family, params, u, ll, g, True, n_ok)
