"""Independent reference computations used by the tests.

Nothing here imports the package's likelihood code.
"""

import math

import numpy as np


def poisson_pmf(n, mu):
    return math.exp(n * math.log(mu) - mu - math.lgamma(n + 1))


def negbin_pmf_direct(n, p, r):
    return math.exp(math.lgamma(n + r) - math.lgamma(r) - math.lgamma(n + 1) + r * math.log(p) + n * math.log1p(-p))


def coarse_cells(pmf, min_mass=0.05):
    """Start indices of consecutive support cells each holding >= min_mass."""
    starts = [0]
    acc = 0.0
    for i, p in enumerate(pmf):
        acc += p
        if acc >= min_mass and i + 1 < len(pmf):
            starts.append(i + 1)
            acc = 0.0
    if len(starts) > 1 and pmf[starts[-1]:].sum() < min_mass:
        starts.pop()
    return np.array(starts)


def coarse_tv(samples, pmf, min_mass=0.05):
    """Total-variation distance between the sample histogram and ``pmf``
    after merging the support into cells of at least ``min_mass``.

    Samples beyond the pmf's support fall in the last cell.
    """
    samples = np.minimum(np.asarray(samples), len(pmf) - 1)
    emp = np.bincount(samples, minlength=len(pmf)) / len(samples)
    starts = coarse_cells(pmf, min_mass)
    return 0.5 * np.abs(np.add.reduceat(emp, starts) - np.add.reduceat(pmf, starts)).sum()


def bisect_root(func, lo, hi, tol=1e-15, max_iter=400):
    flo = func(lo)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = func(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= tol * abs(hi):
            break
    return 0.5 * (lo + hi)


def central_difference(fun, x, rel=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        h = rel * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fun(xp) - fun(xm)) / (2 * h)
    return g
