"""Log-logistic exposure-response curve and the three count observation models.

Reproduction counts are Poisson with mean ``f_ij * NID_ij``. The rate
``f_ij`` is either the curve value itself (Poisson model) or a gamma draw
around it:

* NegBin2: ``f_ij ~ Gamma(shape=1/w, rate=1/(w f))``, variance ``mu (1 + w mu)``
* NegBin1: ``f_ij ~ Gamma(shape=f/w, rate=1/w)``, variance ``mu (1 + w NID)``

Marginalizing the gamma gives negative binomial laws written here as
``Negbin(p, r)`` with mean ``r (1 - p) / p``. Gamma distributions use the
shape-rate convention everywhere.

All log-probabilities are evaluated in log space so counts in the thousands
and overdispersion close to zero stay accurate.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, gammaln

__all__ = [
    "Family",
    "CurveParams",
    "StochasticFamily",
    "ModelSpec",
    "log_logistic",
    "log_log_logistic",
    "negbin_logpmf",
    "negbin2_params",
    "negbin1_params",
    "family_logpmf",
    "mixture_sample",
    "sample_counts",
    "sample_rates",
    "log_likelihood",
    "loglik_gradient",
    "loglik_arrays",
    "loglik_and_grad_arrays",
]

LN10 = math.log(10.0)


class Family(str, enum.Enum):
    POISSON = "poisson"
    NEGBIN1 = "negbin1"
    NEGBIN2 = "negbin2"

    @property
    def has_omega(self) -> bool:
        return self is not Family.POISSON

    @property
    def n_params(self) -> int:
        return 4 if self.has_omega else 3

    @property
    def label(self) -> str:
        return {"poisson": "Poisson", "negbin1": "NegBin1", "negbin2": "NegBin2"}[self.value]


@dataclass(frozen=True)
class CurveParams:
    """``d`` control rate (offspring per individual-day), ``e`` EC50, ``b`` slope."""

    d: float
    e: float
    b: float

    def __post_init__(self):
        if not (self.d > 0 and self.e > 0 and self.b > 0):
            raise ValueError(f"curve parameters must be positive, got {self}")


@dataclass(frozen=True)
class StochasticFamily:
    kind: Family
    omega: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Family(self.kind))
        if self.kind.has_omega:
            if self.omega is None or not self.omega > 0:
                raise ValueError(f"{self.kind.label} requires omega > 0")
        elif self.omega is not None:
            raise ValueError("the Poisson model has no overdispersion parameter")


@dataclass(frozen=True)
class ModelSpec:
    curve: CurveParams
    stochastic: StochasticFamily

    @property
    def family(self) -> Family:
        return self.stochastic.kind


def _log_ratio(c, e):
    with np.errstate(divide="ignore"):
        return np.log(np.divide(c, e))


def log_log_logistic(c, d, e, b):
    """``log f(c)``; stable when ``(c/e)**b`` overflows. Broadcasts."""
    z = np.multiply(b, _log_ratio(c, e))
    return np.log(d) - np.logaddexp(0.0, z)


def log_logistic(c, curve: CurveParams):
    """``d / (1 + (c/e)**b)``, with ``f(0) = d``."""
    z = curve.b * _log_ratio(np.asarray(c, dtype=float), curve.e)
    with np.errstate(over="ignore"):
        out = curve.d / (1.0 + np.exp(z))
    return float(out) if np.ndim(out) == 0 else out


def _log_binom_coef(n, r):
    """``lgamma(n + r) - lgamma(r) - lgamma(n + 1)`` without cancellation for large r."""
    n = np.asarray(n, dtype=float)
    pos = n > 0
    safe_n = np.where(pos, n, 1.0)
    return np.where(pos, -betaln(safe_n, r) - np.log(safe_n), 0.0)


def _nb_logpmf_odds(n, r, log_q):
    """Negative binomial log-pmf with ``q = (1 - p) / p`` given as ``log q``."""
    log1p_q = np.logaddexp(0.0, log_q)
    return _log_binom_coef(n, r) - (r + n) * log1p_q + n * log_q


def negbin_logpmf(n, p, r):
    """Log-pmf of Negbin(p, r): mean ``r (1-p)/p``, variance ``r (1-p)/p**2``."""
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(~(p > 0)) or np.any(~(p < 1)):
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if np.any(~(r > 0)):
        raise ValueError(f"r must be positive, got {r}")
    n = np.asarray(n, dtype=float)
    out = _log_binom_coef(n, r) + r * np.log(p) + n * np.log1p(-p)
    return float(out) if np.ndim(out) == 0 else out


def negbin2_params(f: float, nid: float, omega: float) -> tuple[float, float]:
    """(p, r) of the quadratic-variance model."""
    return 1.0 / (1.0 + omega * f * nid), 1.0 / omega


def negbin1_params(f: float, nid: float, omega: float) -> tuple[float, float]:
    """(p, r) of the linear-variance model.

    Mixing ``Poisson(f_ij * nid)`` over ``f_ij ~ Gamma(f/omega, 1/omega)``
    gives ``p = 1/(1 + omega*nid)`` and ``r = f/omega``; the mean is then
    ``f * nid`` and the variance ``f * nid * (1 + omega*nid)``.
    """
    return 1.0 / (1.0 + omega * nid), f / omega


def family_logpmf(n, f, nid, omega, family):
    """Observation log-pmf of count ``n`` given rate ``f`` and exposure ``nid``."""
    family = Family(family)
    log_f = np.log(f)
    return _logpmf_from_log_f(np.asarray(n, dtype=float), log_f, np.asarray(nid, dtype=float), omega, family)


def _logpmf_from_log_f(n, log_f, nid, omega, family):
    log_nid = np.log(nid)
    if family is Family.POISSON:
        log_mu = log_f + log_nid
        return n * log_mu - np.exp(log_mu) - gammaln(n + 1.0)
    log_w = np.log(omega)
    if family is Family.NEGBIN2:
        r = np.exp(-log_w)
        return _nb_logpmf_odds(n, r, log_w + log_f + log_nid)
    r = np.maximum(np.exp(log_f - log_w), 1e-300)
    return _nb_logpmf_odds(n, r, log_w + log_nid)


def _gamma_mixing(f_mean, omega, family):
    """(shape, rate) of the gamma distribution of the replicate rate."""
    if family is Family.NEGBIN2:
        return 1.0 / omega, 1.0 / (omega * f_mean)
    if family is Family.NEGBIN1:
        return f_mean / omega, 1.0 / omega
    raise ValueError(f"no gamma mixing for {family}")


def sample_rates(f_mean, omega, family, rng: np.random.Generator, size=None):
    """Replicate-level rates ``f_ij``; the curve value itself for Poisson."""
    family = Family(family)
    if family is Family.POISSON:
        f = np.asarray(f_mean, dtype=float)
        return np.broadcast_to(f, size).copy() if size is not None else f
    shape, rate = _gamma_mixing(np.asarray(f_mean, dtype=float), np.asarray(omega, dtype=float), family)
    return rng.gamma(shape, 1.0 / rate, size=size)


def mixture_sample(f_mean, nid, omega, family, rng: np.random.Generator, size=None):
    """Draw counts by gamma mixing then Poisson sampling (NegBin families only)."""
    family = Family(family)
    if family is Family.POISSON:
        raise ValueError("mixture_sample requires a NegBin family")
    f_ij = sample_rates(f_mean, omega, family, rng, size=size)
    return rng.poisson(f_ij * nid)


def sample_counts(f_mean, nid, omega, family, rng: np.random.Generator, size=None):
    """Counts from the full stochastic model of ``family``."""
    family = Family(family)
    if family is Family.POISSON:
        return rng.poisson(np.asarray(f_mean) * nid, size=size)
    return mixture_sample(f_mean, nid, omega, family, rng, size=size)


# -- vectorized likelihood on the unconstrained scale -------------------------
#
# Leading dimensions of parameter arrays broadcast against the data axis.
# Gradients are taken on the unconstrained scale (log d, log e, log10 b[, log10 omega]).


def loglik_arrays(family, d, e, b, omega, conc, counts, nids):
    """Log-likelihood for natural-scale parameters; arrays give one value per entry."""
    family = Family(family)
    d = np.asarray(d, dtype=float)[..., None]
    e = np.asarray(e, dtype=float)[..., None]
    b = np.asarray(b, dtype=float)[..., None]
    log_f = np.log(d) - np.logaddexp(0.0, b * _log_ratio(conc, e))
    if omega is not None:
        omega = np.asarray(omega, dtype=float)[..., None]
    return _logpmf_from_log_f(counts, log_f, nids, omega, family).sum(axis=-1)


def loglik_and_grad_arrays(family, u, conc, counts, nids):
    """Log-likelihood and its gradient at a single unconstrained point ``u``."""
    family = Family(family)
    log_d, log_e, log10_b = u[0], u[1], u[2]
    b = 10.0**log10_b
    lr = _log_ratio(conc, math.exp(log_e))
    z = b * lr
    log_f = log_d - np.logaddexp(0.0, z)
    # s = u/(1+u) with u = (c/e)**b; zero at the control
    s = np.exp(z - np.logaddexp(0.0, z))
    s_lr = np.where(conc > 0, s * np.where(conc > 0, lr, 0.0), 0.0)
    n = counts
    if family is Family.POISSON:
        mu = np.exp(log_f) * nids
        terms = n * (log_f + np.log(nids)) - mu - gammaln(n + 1.0)
        g_f = n - mu
        g_w = None
    else:
        log_w = u[3] * LN10
        w = math.exp(log_w)
        if family is Family.NEGBIN2:
            r = 1.0 / w
            log_q = log_w + log_f + np.log(nids)
            q = np.exp(log_q)
            terms = _nb_logpmf_odds(n, r, log_q)
            g_f = (n - np.exp(log_f) * nids) / (1.0 + q)
            dpsi = digamma(n + r) - digamma(r)
            g_w = -r * dpsi + r * np.log1p(q) - (r + n) * q / (1.0 + q) + n
        else:
            r = np.maximum(np.exp(log_f - log_w), 1e-300)
            q = w * nids
            terms = _nb_logpmf_odds(n, r, np.log(q))
            a = digamma(n + r) - digamma(r) - np.log1p(q)
            g_f = r * a
            g_w = -r * a - (r + n) * q / (1.0 + q) + n
    grad = [g_f.sum(), (g_f * b * s).sum(), -(g_f * s_lr).sum() * b * LN10]
    if g_w is not None:
        grad.append(g_w.sum() * LN10)
    return float(terms.sum()), np.array(grad)


def _unconstrained(spec: ModelSpec) -> np.ndarray:
    c = spec.curve
    u = [math.log(c.d), math.log(c.e), math.log10(c.b)]
    if spec.family.has_omega:
        u.append(math.log10(spec.stochastic.omega))
    return np.array(u)


def log_likelihood(spec: ModelSpec, data) -> float:
    """Sum of observation log-pmfs over the replicates of ``data``."""
    c = spec.curve
    return float(
        loglik_arrays(
            spec.family, c.d, c.e, c.b, spec.stochastic.omega, data.concentrations, data.counts, data.nids
        )
    )


def loglik_gradient(spec: ModelSpec, data) -> np.ndarray:
    """Gradient with respect to (log d, log e, log10 b[, log10 omega])."""
    _, g = loglik_and_grad_arrays(spec.family, _unconstrained(spec), data.concentrations, data.counts, data.nids)
    return g
