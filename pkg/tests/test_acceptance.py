"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into a section of the pytest terminal summary.
Simulation-based criteria use fixed seeds and the default sampler settings.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from oracles import bisect_root, central_difference, coarse_tv
from reprofit.analysis import CHLORDAN_DESIGN, Design, coverage, dic, ec_x, per_alive_fit, posterior_predictive, simulate_dataset
from reprofit.dataset import BioassayDataset, ReplicateDatum, assemble_dataset, load_dataset
from reprofit.inference import (
    GammaPrior,
    LogNormal,
    PriorSpec,
    SamplerConfig,
    calibrate_priors,
    effective_sample_size,
    posterior_summary,
    run_mcmc,
)
from reprofit.model import (
    CurveParams,
    Family,
    ModelSpec,
    StochasticFamily,
    family_logpmf,
    loglik_and_grad_arrays,
    loglik_arrays,
    mixture_sample,
)

NB1_TRUTH = ModelSpec(CurveParams(5.60, 1.66, 10**-0.05), StochasticFamily("negbin1", 10**-0.91))
POISSON_TRUTH = ModelSpec(CurveParams(5.55, 1.75, 10**-0.03), StochasticFamily("poisson"))
PPC_DESIGN = Design((0, 0.18, 0.73, 1.82, 7), replicates=8, animals=1, duration=21)
N_RUNS = 20


def report(criterion: int, passed: bool, detail: str):
    line = f"CRITERION {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def _pmf_table(mu, nid, omega, family):
    sd = math.sqrt(mu * (1 + omega * (nid if family is Family.NEGBIN1 else mu)))
    n = np.arange(int(mu + 40 * sd + 50))
    return np.exp(family_logpmf(n, mu / nid, nid, omega, family))


def _fit(family, data, seed):
    return run_mcmc(family, data, calibrate_priors(data), SamplerConfig(seed=seed))


@pytest.fixture(scope="module")
def nb1_runs():
    """Criterion 5 datasets with NegBin1 and Poisson fits."""
    runs = []
    t0 = time.perf_counter()
    for k in range(N_RUNS):
        data = assemble_dataset(*simulate_dataset(NB1_TRUTH, CHLORDAN_DESIGN, seed=1000 + k))
        runs.append({"data": data, Family.NEGBIN1: _fit(Family.NEGBIN1, data, seed=k)})
    nb1_seconds = time.perf_counter() - t0
    for k, run in enumerate(runs):
        run[Family.POISSON] = _fit(Family.POISSON, run["data"], seed=100 + k)
    return runs, nb1_seconds


def test_criterion_01_mixture_identity():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for family in (Family.NEGBIN2, Family.NEGBIN1):
        for _ in range(20):
            f = rng.uniform(0.2, 10.0)
            nid = rng.uniform(1.0, 210.0)
            omega = 10 ** rng.uniform(-3, 0)
            draws = mixture_sample(f, nid, omega, family, rng, size=100_000)
            worst = max(worst, coarse_tv(draws, _pmf_table(f * nid, nid, omega, family)))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 0.01 and elapsed < 30, f"max coarse TV {worst:.4f} over 40 tuples (<= 0.01), {elapsed:.1f} s (< 30 s)")


def test_criterion_02_poisson_limit():
    n = np.arange(201)
    worst = 0.0
    for mu in np.linspace(0.01, 50.0, 60):
        for nid in (1.0, 21.0, 210.0):
            ref = stats.poisson.pmf(n, mu)
            for family in (Family.NEGBIN1, Family.NEGBIN2):
                p = np.exp(family_logpmf(n, mu / nid, nid, 1e-8, family))
                worst = max(worst, float(np.abs(p - ref).max()))
    report(2, worst < 1e-6, f"max |pmf - Poisson| = {worst:.2e} at omega=1e-8 (< 1e-6)")


def test_criterion_03_moment_laws():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(10):
        f = rng.uniform(0.5, 8.0)
        nid = rng.uniform(5.0, 210.0)
        omega = 10 ** rng.uniform(-2, 0)
        mu = f * nid
        for family, law in ((Family.NEGBIN2, mu * (1 + omega * mu)), (Family.NEGBIN1, mu * (1 + omega * nid))):
            x = mixture_sample(f, nid, omega, family, rng, size=10_000).astype(float)
            var = x.var(ddof=1)
            m4 = np.mean((x - x.mean()) ** 4)
            se = math.sqrt((m4 - var**2) / x.size)
            worst = max(worst, abs(var - law) / se)
    report(3, worst < 3, f"max |var - law| = {worst:.2f} SE over 10 sets x 2 families (< 3)")


def test_criterion_04_sampler_oracle():
    a0, b0 = 2.0, 0.5
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    worst = 0.0
    for size in (3, 12, 40):
        nids = rng.uniform(10, 21, size=size)
        counts = rng.poisson(4.0 * nids)
        data = BioassayDataset(tuple(ReplicateDatum(0.0, int(n), t, False, str(i)) for i, (n, t) in enumerate(zip(counts, nids))), 21.0)
        priors = PriorSpec(LogNormal(0.0, 1.0), d_prior=GammaPrior(a0, b0))
        cs = run_mcmc("poisson", data, priors, SamplerConfig(pilot_iterations=2000, pilot_burnin=2000, target_ess=3000, seed=size))
        shape, rate = a0 + counts.sum(), b0 + nids.sum()
        post_mean, post_var = shape / rate, shape / rate**2
        d = cs.param("d")
        ess = sum(effective_sample_size(c) for c in d)
        mean_se = math.sqrt(post_var / ess)
        var_se = post_var * math.sqrt((2 + 6 / shape) / ess)
        worst = max(worst, abs(d.mean() - post_mean) / mean_se, abs(d.var(ddof=1) - post_var) / var_se)
    elapsed = time.perf_counter() - t0
    report(4, worst < 3 and elapsed < 60, f"max deviation {worst:.2f} MC SE at sizes 3/12/40 (< 3), {elapsed:.1f} s (< 60 s)")


def test_criterion_05_model_recovery(nb1_runs):
    runs, seconds = nb1_runs
    hits_d = hits_e = 0
    for run in runs:
        s = posterior_summary(run[Family.NEGBIN1])
        hits_d += s["d"].q025 <= NB1_TRUTH.curve.d <= s["d"].q975
        hits_e += s["e"].q025 <= NB1_TRUTH.curve.e <= s["e"].q975
    ok = hits_d >= 16 and hits_e >= 16 and seconds < 900
    report(5, ok, f"d covered {hits_d}/20, e covered {hits_e}/20 (>= 16 each), {seconds:.0f} s (< 900 s)")


def test_criterion_06_dic_selection(nb1_runs):
    runs, _ = nb1_runs
    nb1_wins = sum(dic(r[Family.NEGBIN1], r["data"]).dic < dic(r[Family.POISSON], r["data"]).dic for r in runs)
    poisson_ok = 0
    for k in range(N_RUNS):
        data = assemble_dataset(*simulate_dataset(POISSON_TRUTH, CHLORDAN_DESIGN, seed=2000 + k))
        dp = dic(_fit(Family.POISSON, data, seed=200 + k), data).dic
        dn = dic(_fit(Family.NEGBIN1, data, seed=300 + k), data).dic
        poisson_ok += dp <= dn + 2
    ok = nb1_wins >= 18 and poisson_ok >= 15
    report(6, ok, f"NegBin1 truth: DIC(NB1) < DIC(P) in {nb1_wins}/20 (>= 18); "
                  f"Poisson truth: DIC(P) <= DIC(NB1)+2 in {poisson_ok}/20 (>= 15)")


def test_criterion_07_ppc_coverage():
    calibrated = undercover = 0
    for k in range(N_RUNS):
        data = assemble_dataset(*simulate_dataset(NB1_TRUTH, PPC_DESIGN, seed=3000 + k))
        assert len(data) == 40
        ivs = posterior_predictive(_fit(Family.NEGBIN1, data, seed=400 + k), data, seed=k)
        c95, c50 = coverage(ivs, 0.95), coverage(ivs, 0.5)
        calibrated += 85 <= c95 <= 100 and 32 <= c50 <= 68
        ivs_p = posterior_predictive(_fit(Family.POISSON, data, seed=500 + k), data, seed=k)
        undercover += coverage(ivs_p, 0.95) < 85
    ok = calibrated >= 18 and undercover >= 15
    report(7, ok, f"NegBin1 calibrated in {calibrated}/20 (>= 18); Poisson 95% coverage < 85 in {undercover}/20 (>= 15)")


def test_criterion_08_ecx_algebra():
    rng = np.random.default_rng(808)
    worst = 0.0
    exact50 = True
    for _ in range(1000):
        curve = CurveParams(rng.uniform(0.1, 20), 10 ** rng.uniform(-2, 2), 10 ** rng.uniform(-1, 1))
        x = rng.uniform(1, 99)
        target = curve.d * (1 - x / 100)
        root = bisect_root(lambda c: curve.d / (1 + (c / curve.e) ** curve.b) - target, 1e-30 * curve.e, 1e30 * curve.e)
        worst = max(worst, abs(ec_x(curve, x) - root) / root)
        exact50 &= ec_x(curve, 50) == curve.e
    report(8, worst <= 1e-10 and exact50, f"max relative gap {worst:.1e} on 1000 sets (<= 1e-10); EC50 == e exactly: {exact50}")


def test_criterion_09_per_alive_bias():
    design = Design(CHLORDAN_DESIGN.concentrations, replicates=4, animals=10, duration=21,
                    mortality=(0, 0, 0, 0.1, 0.3, 0.5))
    surv, repro = simulate_dataset(NB1_TRUTH, design, seed=909)
    true_ec50 = NB1_TRUTH.curve.e
    per_alive = per_alive_fit(surv, repro).params["e"].estimate
    data = assemble_dataset(surv, repro)
    s = posterior_summary(_fit(Family.NEGBIN1, data, seed=9))["e"]
    ok = per_alive > 1.1 * true_ec50 and s.q025 <= true_ec50 <= s.q975
    report(9, ok, f"per-alive EC50 {per_alive:.3f} vs true {true_ec50} (> +10%); "
                  f"NegBin1 CrI [{s.q025:.3f}, {s.q975:.3f}] contains truth")


def test_criterion_10_gradient():
    rng = np.random.default_rng(1010)
    worst = 0.0
    for family in Family:
        for _ in range(50):
            conc = np.repeat([0.0, 0.3, 1.0, 3.0, 10.0], 3)
            nids = rng.uniform(5, 21, size=conc.size)
            counts = rng.poisson(4 * nids / (1 + (conc / 1.5) ** 1.5)).astype(float)
            u = np.array([rng.uniform(-1, 3), rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-3, 1)])[: family.n_params]

            def ll(v):
                omega = 10 ** v[3] if family.has_omega else None
                return float(loglik_arrays(family, math.exp(v[0]), math.exp(v[1]), 10 ** v[2], omega, conc, counts, nids))

            _, g = loglik_and_grad_arrays(family, u, conc, counts, nids)
            fd = central_difference(ll, u)
            worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
    report(10, worst <= 1e-4, f"max relative gradient error {worst:.1e} at 50 points x 3 families (<= 1e-4)")


def test_criterion_11_real_data():
    root = os.environ.get("REPROFIT_CHLORDAN_DIR")
    surv = Path(root) / "survival.csv" if root else None
    repro = Path(root) / "reproduction.csv" if root else None
    if surv is None or not (surv.is_file() and repro.is_file()):
        line = "CRITERION 11: N/A - chlordan supporting-information files not provided (set REPROFIT_CHLORDAN_DIR)"
        ACCEPTANCE_LINES.append(line)
        print(line)
        pytest.skip("chlordan data not available")
    data = load_dataset(surv, repro, 21.0)
    fits = {fam: _fit(fam, data, seed=11) for fam in Family}
    s = posterior_summary(fits[Family.NEGBIN1])
    table = {"d": (5.10, 6.20), "e": (1.16, 2.25), "log10_b": (-0.16, 0.06), "log10_omega": (-1.17, -0.67)}
    inside = all(lo <= s[name].median <= hi for name, (lo, hi) in table.items())
    dics = {fam: dic(cs, data).dic for fam, cs in fits.items()}
    ordered = dics[Family.NEGBIN1] < dics[Family.NEGBIN2] < dics[Family.POISSON]
    report(11, inside and ordered, f"NegBin1 medians inside reference CrIs: {inside}; DIC "
                                   f"NB1 {dics[Family.NEGBIN1]:.1f} < NB2 {dics[Family.NEGBIN2]:.1f} < P {dics[Family.POISSON]:.1f}: {ordered}")
