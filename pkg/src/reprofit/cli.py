"""Command-line front end: ``reprofit {nid,fit,baseline,simulate}``.

Exit codes: 0 success, 1 hard error (bad input, failed fit), 2 finished
with convergence warnings.

Seeding: every random quantity is derived from ``--seed``.  Model ``k`` in
the fixed order poisson, negbin1, negbin2 gets the integer seed drawn from
``SeedSequence([seed, k])``; the sampler splits that per chain and the
predictive check and curve band use ``+1`` and ``+2`` offsets of it.  A
model therefore gets the same numbers whether fitted alone or with ``all``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .analysis import (
    AnalysisError,
    Design,
    coverage,
    curve_band,
    dic,
    ecx_posterior,
    per_alive_fit,
    posterior_predictive,
    simulate_dataset,
)
from .dataset import (
    DataError,
    assemble_dataset,
    compute_nid,
    dataset_digest,
    format_number,
    parse_reproduction_table,
    parse_survival_table,
    write_reproduction_table,
    write_survival_table,
)
from .inference import InferenceError, SamplerConfig, calibrate_priors, posterior_summary, run_mcmc
from .model import CurveParams, Family, ModelSpec, StochasticFamily

log = logging.getLogger("reprofit")

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2
FAMILY_ORDER = (Family.POISSON, Family.NEGBIN1, Family.NEGBIN2)


class UsageError(ValueError):
    pass


def _ecx_levels(text: str) -> tuple[float, ...]:
    try:
        levels = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --ecx list {text!r}") from None
    if not levels or any(not 0 < x < 100 for x in levels):
        raise argparse.ArgumentTypeError("EC_x levels must lie strictly between 0 and 100")
    return levels


def _models(text: str) -> tuple[Family, ...]:
    if text == "all":
        return FAMILY_ORDER
    try:
        chosen = {Family(t.strip()) for t in text.split(",")}
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown model {text!r}") from None
    return tuple(f for f in FAMILY_ORDER if f in chosen)


def _chains(text: str) -> int:
    n = int(text)
    if n < 2:
        raise argparse.ArgumentTypeError("at least two chains are needed for R-hat")
    return n


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def model_seed(seed: int, family: Family) -> int:
    k = FAMILY_ORDER.index(Family(family))
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _num(x):
    """JSON-safe float: NaN and infinities become null."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_number(v) if isinstance(v, float) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _read_inputs(args):
    for p in (args.survival, args.reproduction):
        if not Path(p).is_file():
            raise UsageError(f"no such file: {p}")
    surv = parse_survival_table(args.survival)
    repro = parse_reproduction_table(args.reproduction)
    return surv, repro


# -- nid ----------------------------------------------------------------------

def cmd_nid(args) -> int:
    if not Path(args.survival).is_file():
        raise UsageError(f"no such file: {args.survival}")
    rows = []
    for s in parse_survival_table(args.survival):
        nid = compute_nid(s, args.duration)
        rows.append((s.replicate_id, float(s.concentration), float(nid), "true" if s.final_count < s.initial_count else "false"))
    header = ("replicate", "concentration", "nid", "had_mortality")
    if args.out:
        _write_csv(Path(args.out), header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_number(v) if isinstance(v, float) else v for v in r])
    return EXIT_OK


# -- fit ----------------------------------------------------------------------

def _summary_block(summary, family: Family):
    out = {}
    for name in ("d", "e", "log10_b", "log10_omega"):
        p = summary.params.get(name)
        if p is None:
            out[name] = None
        else:
            out[name] = {k: _num(getattr(p, k)) for k in ("median", "q025", "q975", "rhat", "ess")}
    return out


def fit_model(family: Family, data, priors, args, out: Path):
    seed = model_seed(args.seed, family)
    config = SamplerConfig(n_chains=args.chains, target_ess=args.target_ess, seed=seed)
    chains = run_mcmc(family, data, priors, config)
    summary = posterior_summary(chains)
    warnings = []
    for name, p in summary.params.items():
        if not (math.isfinite(p.rhat) and p.rhat < config.rhat_threshold):
            warnings.append(f"{name}: R-hat {p.rhat:.3f} not below {config.rhat_threshold}")
    d = dic(chains, data)
    intervals = posterior_predictive(chains, data, n_draws=5000, seed=seed + 1)
    conc = data.tested_concentrations()
    band = curve_band(chains, (float(conc.min()), float(conc.max())), n_points=100, n_draws=5000, seed=seed + 2)
    ecx = [ecx_posterior(chains, x) for x in args.ecx]

    tag = family.value
    _write_csv(out / f"curve_band_{tag}.csv", ("concentration", "q025", "q50", "q975"),
               zip(band.concentrations.tolist(), band.q025.tolist(), band.q50.tolist(), band.q975.tolist()))
    _write_csv(out / f"ppc_{tag}.csv",
               ("replicate", "concentration", "nid", "observed", "level", "lower", "median", "upper", "covered"),
               ((iv.replicate_id, float(iv.concentration), float(iv.nid), iv.observed, float(iv.level),
                 iv.lower, iv.median_pred, iv.upper, "true" if iv.covered else "false") for iv in intervals))

    return {
        "family": tag,
        "label": family.label,
        "summary": _summary_block(summary, family),
        "dic": {"dic": _num(d.dic), "p_d": _num(d.p_d), "mean_deviance": _num(d.mean_deviance),
                "deviance_at_mean": _num(d.deviance_at_mean)},
        "coverage": {"95": _num(coverage(intervals, 0.95)), "50": _num(coverage(intervals, 0.5))},
        "ecx": [{"x": _num(e.x), "median": _num(e.point), "q025": _num(e.lower), "q975": _num(e.upper)} for e in ecx],
        "mcmc": {
            "chains": chains.n_chains,
            "iterations_per_chain": int(chains.n_iterations),
            "thin": int(chains.thin),
            "stored_draws": int(chains.pooled().shape[0]),
            "acceptance_rates": [_num(a) for a in chains.acceptance_rates],
            "seed": seed,
        },
        "warnings": warnings,
    }


def _add_relative(models: list, reference: dict | None):
    """Attach EC_x values relative to the NegBin1 point estimate at each level."""
    if reference is None:
        return
    for m in models:
        for row in m["ecx"]:
            ref = reference.get(row["x"])
            for key in ("median", "q025", "q975"):
                val = row[key]
                row[f"relative_{key}"] = None if ref is None or val is None else _num(val / ref)


def _write_fit_ecx(out: Path, block: dict):
    rows = []
    for row in block["ecx"]:
        rows.append((float(row["x"]), row["median"], row["q025"], row["q975"],
                     row.get("relative_median"), row.get("relative_q025"), row.get("relative_q975")))
    _write_csv(out / f"ecx_{block['family']}.csv",
               ("x", "median", "q025", "q975", "relative_median", "relative_q025", "relative_q975"),
               ([("" if v is None else v) for v in r] for r in rows))


def _write_summary_csv(out: Path, models: list):
    rows = []
    for m in models:
        for name, s in m["summary"].items():
            if s is None:
                rows.append((m["family"], name, "", "", "", "", ""))
            else:
                rows.append((m["family"], name, *("" if s[k] is None else s[k] for k in ("median", "q025", "q975", "rhat", "ess"))))
        rows.append((m["family"], "DIC", m["dic"]["dic"], "", "", "", ""))
    _write_csv(out / "summary.csv", ("model", "parameter", "median", "q025", "q975", "rhat", "ess"), rows)


def cmd_fit(args) -> int:
    surv, repro = _read_inputs(args)
    data = assemble_dataset(surv, repro, test_duration=args.duration)
    priors = calibrate_priors(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    models = [fit_model(fam, data, priors, args, out) for fam in args.model]
    nb1 = next((m for m in models if m["family"] == Family.NEGBIN1.value), None)
    reference = {row["x"]: row["median"] for row in nb1["ecx"]} if nb1 else None
    _add_relative(models, reference)
    for m in models:
        _write_fit_ecx(out, m)
    if args.format == "csv":
        _write_summary_csv(out, models)

    report = {
        "dataset": {
            "digest": dataset_digest(args.survival, args.reproduction),
            "n_replicates": len(data),
            "test_duration": _num(data.test_duration),
        },
        "seed": args.seed,
        "ecx_levels": [_num(x) for x in args.ecx],
        "models": models,
        "dic_table": {m["family"]: m["dic"]["dic"] for m in models},
    }
    _dump_json(report, out / "report.json")
    warned = [w for m in models for w in m["warnings"]]
    for w in warned:
        log.warning("convergence: %s", w)
    return EXIT_WARN if warned else EXIT_OK


# -- baseline -----------------------------------------------------------------

def _reference_ecx(path) -> dict:
    report = json.loads(Path(path).read_text(encoding="utf-8"))
    for m in report.get("models", []):
        if m.get("family") == Family.NEGBIN1.value:
            return {row["x"]: row["median"] for row in m["ecx"]}
    raise UsageError(f"{path}: no negbin1 section to use as reference")


def cmd_baseline(args) -> int:
    surv, repro = _read_inputs(args)
    res = per_alive_fit(surv, repro, duration=args.duration, ecx_levels=args.ecx)
    reference = _reference_ecx(args.reference) if args.reference else None

    def est(e):
        return {"estimate": _num(e.estimate), "se": _num(e.se), "lower": _num(e.lower), "upper": _num(e.upper),
                "negative_lower_bound": bool(e.negative_lower_bound)}

    ecx_rows = []
    for x, e in zip(args.ecx, res.ecx):
        row = {"x": _num(x), **est(e)}
        if reference is not None:
            ref = reference.get(x)
            for key in ("estimate", "lower", "upper"):
                row[f"relative_{key}"] = None if ref is None or row[key] is None else _num(row[key] / ref)
        ecx_rows.append(row)
    report = {
        "method": "per-alive",
        "dataset": {"digest": dataset_digest(args.survival, args.reproduction)},
        "params": {k: est(v) for k, v in res.params.items()},
        "residual_sd": _num(res.residual_sd),
        "n_used": res.n_used,
        "dropped": list(res.dropped),
        "ecx": ecx_rows,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out / "baseline.json")
    cols = ["x", "estimate", "se", "lower", "upper", "negative_lower_bound"]
    if reference is not None:
        cols += ["relative_estimate", "relative_lower", "relative_upper"]
    _write_csv(out / "baseline_ecx.csv", cols,
               ([("" if r[c] is None else ("true" if r[c] is True else "false" if r[c] is False else r[c])) for c in cols]
                for r in ecx_rows))
    return EXIT_OK


# -- simulate -----------------------------------------------------------------

DESIGN_KEYS = {
    "concentrations", "replicates", "animals", "duration", "mortality", "observation_times",
    "family", "d", "e", "log10_b", "log10_omega",
}


def parse_design_text(text: str, source: str = "<design>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in DESIGN_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise UsageError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            if key == "family":
                values[key] = Family(val).value
            elif key in ("concentrations", "mortality", "observation_times"):
                values[key] = tuple(float(v) for v in val.split(","))
            elif key in ("replicates", "animals"):
                values[key] = int(val)
            else:
                values[key] = float(val)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: bad value for {key!r}: {val!r}") from None
    return values


def load_design(path_or_name: str) -> dict:
    if path_or_name == "chlordan":
        text = resources.files("reprofit").joinpath("data/chlordan_design.txt").read_text(encoding="utf-8")
        return parse_design_text(text, "chlordan")
    p = Path(path_or_name)
    if not p.is_file():
        raise UsageError(f"no such design file: {path_or_name}")
    return parse_design_text(p.read_text(encoding="utf-8"), str(p))


def design_and_truth(values: dict, overrides: dict) -> tuple[Design, ModelSpec]:
    values = {**values, **{k: v for k, v in overrides.items() if v is not None}}
    missing = [k for k in ("concentrations", "replicates", "animals", "duration") if k not in values]
    if missing:
        raise UsageError(f"design is missing {', '.join(missing)}")
    try:
        design = Design(values["concentrations"], values["replicates"], values["animals"], values["duration"],
                        observation_times=values.get("observation_times"), mortality=values.get("mortality"))
    except ValueError as exc:
        raise UsageError(f"invalid design: {exc}") from None
    missing = [k for k in ("family", "d", "e", "log10_b") if k not in values]
    if missing:
        raise UsageError(f"true parameters missing: {', '.join(missing)}")
    family = Family(values["family"])
    omega = None
    if family.has_omega:
        if "log10_omega" not in values:
            raise UsageError("log10_omega is required for negative-binomial truth")
        omega = 10.0 ** values["log10_omega"]
    try:
        spec = ModelSpec(CurveParams(values["d"], values["e"], 10.0 ** values["log10_b"]),
                         StochasticFamily(family.value, omega))
    except ValueError as exc:
        raise UsageError(f"invalid true parameters: {exc}") from None
    return design, spec


def cmd_simulate(args) -> int:
    values = load_design(args.design)
    overrides = {"family": args.family, "d": args.d, "e": args.e, "log10_b": args.log10_b,
                 "log10_omega": args.log10_omega}
    design, spec = design_and_truth(values, overrides)
    surv, repro = simulate_dataset(spec, design, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "survival.csv").write_text(write_survival_table(surv), encoding="utf-8")
    (out / "reproduction.csv").write_text(write_reproduction_table(repro), encoding="utf-8")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reprofit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("nid", help="number of individual-days per replicate")
    p.add_argument("--survival", required=True)
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_nid)

    p = sub.add_parser("fit", help="Bayesian fit of one or more stochastic models")
    p.add_argument("--survival", required=True)
    p.add_argument("--reproduction", required=True)
    p.add_argument("--duration", type=float)
    p.add_argument("--model", type=_models, default=FAMILY_ORDER, help="poisson|negbin1|negbin2|all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=_chains, default=3)
    p.add_argument("--target-ess", type=_positive_int, default=4000)
    p.add_argument("--ecx", type=_ecx_levels, default=(10.0, 20.0, 50.0))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("baseline", help="per-alive least-squares fit")
    p.add_argument("--survival", required=True)
    p.add_argument("--reproduction", required=True)
    p.add_argument("--duration", type=float)
    p.add_argument("--ecx", type=_ecx_levels, default=(10.0, 20.0, 50.0))
    p.add_argument("--reference", help="fit report.json whose negbin1 EC_x normalizes the estimates")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("simulate", help="simulate a bioassay from a design file")
    p.add_argument("--design", required=True, help="key = value design file, or 'chlordan'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--family", choices=[f.value for f in Family])
    p.add_argument("--d", type=float)
    p.add_argument("--e", type=float)
    p.add_argument("--log10-b", type=float)
    p.add_argument("--log10-omega", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="reprofit: %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (DataError, AnalysisError, InferenceError, UsageError, OSError) as exc:
        print(f"reprofit: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
