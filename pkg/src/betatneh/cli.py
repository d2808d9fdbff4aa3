"""Command-line front end: ``betatneh {fit,predict,simulate,study,sweep}``.

Exit codes: 0 success (converged fit), 1 input or runtime error, 2 fit with an
estimate on a bound, 3 fit that did not converge.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from collections import Counter
from pathlib import Path

import numpy as np

from .estimation import (
    SCHEMA_VERSION,
    Dataset,
    FitResult,
    default_bounds,
    default_init,
    delta_method_ci,
    fit,
    initial_value_sweep,
)
from .lifetable import LifeTableError, WeibullPopHazard, load_life_table
from .model_core import ModelSpec, ParamVector, cum_excess_hazard, excess_hazard, net_survival
from .simulation import (
    SETTINGS,
    SIM_SPEC,
    SimulationConfig,
    StudyAborted,
    initial_value_study,
    run_study,
    simulate_dataset,
)

EXIT_OK, EXIT_ERROR, EXIT_BOUNDARY, EXIT_NOT_CONVERGED = 0, 1, 2, 3
RECORD_HEADER = ["time", "status", "age"]
STRING_COLUMNS = ("sex",)
MAX_AUTO_PROFILES = 20
PREDICT_HEADER = ["t", "excess_hazard", "cum_excess_hazard", "net_survival",
                  "net_survival_lo", "net_survival_hi"]


class CliError(Exception):
    """User-facing error; printed without a traceback, exit code 1."""


def _g6(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6g}"


# ---------------------------------------------------------------- records

def read_records(path, categorical=()):
    """Parse a record CSV into float arrays plus raw string columns.

    The header must start with ``time,status,age``; every further column is a
    covariate. Columns named in ``categorical`` (and ``sex``) stay strings.
    """
    path = Path(path)
    if not path.exists():
        raise CliError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CliError(f"{path}: empty file") from None
        if header[:3] != RECORD_HEADER:
            raise CliError(f"{path}:1: header must start with time,status,age, got {','.join(header)}")
        if len(set(header)) != len(header):
            raise CliError(f"{path}:1: duplicate column names")
        missing = [c for c in categorical if c not in header]
        if missing:
            raise CliError(f"{path}: categorical column(s) not in header: {missing}")
        keep_str = set(categorical) | set(STRING_COLUMNS)
        cols = {h: [] for h in header}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CliError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            for h, cell in zip(header, row):
                cell = cell.strip()
                if h in keep_str:
                    cols[h].append(cell)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise CliError(f"{path}:{line}: column {h!r}: not a number: {cell!r}") from None
                if not math.isfinite(v):
                    raise CliError(f"{path}:{line}: column {h!r}: non-finite value")
                if h == "status" and v not in (0.0, 1.0):
                    raise CliError(f"{path}:{line}: status must be 0 or 1, got {cell}")
                if h in ("time", "age") and v < 0:
                    raise CliError(f"{path}:{line}: {h} must be >= 0, got {cell}")
                cols[h].append(v)
    if not cols["time"]:
        raise CliError(f"{path}: no records")
    return cols


def age_groups(age, breaks):
    """Labels ``<b1``, ``b1-b2``, ..., ``>=bk`` for sorted break points."""
    breaks = sorted(breaks)
    labels = [f"<{breaks[0]:g}"]
    labels += [f"{lo:g}-{hi:g}" for lo, hi in zip(breaks[:-1], breaks[1:])]
    labels.append(f">={breaks[-1]:g}")
    idx = np.searchsorted(breaks, np.asarray(age, dtype=float), side="right")
    return [labels[i] for i in idx]


def expand_categorical(values):
    """Reference level (the most frequent; ties by sort order) and the other levels."""
    counts = Counter(values)
    ref = sorted(counts, key=lambda lv: (-counts[lv], lv))[0]
    others = sorted(lv for lv in counts if lv != ref)
    return ref, others


def indicator(col, level):
    return f"{col}[{level}]"


class Design:
    """Maps user column names (numeric or categorical) onto model covariates."""

    def __init__(self, cols, categorical):
        self.categorical = {}
        self.covariates = {}
        n = len(cols["time"])
        for name, vals in cols.items():
            if name in RECORD_HEADER or name in STRING_COLUMNS or name == "year":
                continue
            if name in categorical:
                ref, others = expand_categorical(vals)
                self.categorical[name] = {"reference": ref, "levels": others}
                arr = np.asarray(vals)
                for lv in others:
                    self.covariates[indicator(name, lv)] = (arr == lv).astype(float)
            else:
                self.covariates[name] = np.asarray(vals, dtype=float)
        self.n = n

    @classmethod
    def from_report(cls, report):
        self = cls.__new__(cls)
        self.categorical = report.get("categorical", {})
        self.covariates = {}
        self.n = 0
        return self

    def resolve(self, names):
        """Model covariate names for a list of user column names."""
        out = []
        for name in names:
            if name in self.categorical:
                out.extend(indicator(name, lv) for lv in self.categorical[name]["levels"])
            elif name in self.covariates:
                out.append(name)
            else:
                raise CliError(f"unknown covariate {name!r}")
        return tuple(out)

    def profile(self, assignments, used):
        """Covariate values for ``{column: value}``; unspecified columns default to 0 / reference."""
        prof = {c: 0.0 for c in used}
        for key, val in assignments.items():
            if key in self.categorical:
                cat = self.categorical[key]
                if val != cat["reference"] and val not in cat["levels"]:
                    raise CliError(f"unknown level {val!r} for {key!r}")
                for lv in cat["levels"]:
                    if indicator(key, lv) in prof:
                        prof[indicator(key, lv)] = float(val == lv)
            elif key in prof:
                try:
                    prof[key] = float(val)
                except ValueError:
                    raise CliError(f"profile value for {key!r} must be numeric, got {val!r}") from None
            else:
                raise CliError(f"unknown profile key {key!r} (model covariates: {sorted(used)})")
        return prof


def _parse_assignments(items, what):
    out = {}
    for item in items or ():
        for part in item.split(","):
            if not part.strip():
                continue
            if "=" not in part:
                raise CliError(f"{what} must look like name=value, got {part!r}")
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _parse_bounds(items):
    out = {}
    for name, rng in _parse_assignments(items, "--bounds").items():
        try:
            lo, hi = (float(v) for v in rng.split(":"))
        except ValueError:
            raise CliError(f"--bounds {name} must be lo:hi, got {rng!r}") from None
        out[name] = (lo, hi)
    return out


def _population(args, cols):
    if args.weibull_pop and args.lifetable:
        raise CliError("give either --weibull-pop or --lifetable, not both")
    if args.weibull_pop:
        s, k = args.weibull_pop
        return WeibullPopHazard(s, k), {}, {"weibull": {"scale": s, "shape": k}}
    if args.lifetable:
        table = load_life_table(args.lifetable)
        for c in ("sex", "year"):
            if c not in cols:
                raise CliError(f"--lifetable needs a {c!r} column in the records")
        kw = {"sex": cols["sex"], "year": cols["year"], "static_year": args.static_year}
        return table, kw, {"lifetable": str(args.lifetable), **table.summary()}
    raise CliError("a population hazard is required: --weibull-pop SCALE SHAPE or --lifetable PATH")


def _spec_from_args(args, design: Design) -> ModelSpec:
    alpha = design.resolve(_split(args.alpha_cov))
    tau = design.resolve(_split(args.tau_cov))
    try:
        return ModelSpec(alpha_design=alpha, tau_design=tau, bounds=_parse_bounds(args.bounds),
                         max_expansions=args.max_expansions, tau_upper_cap=args.tau_cap,
                         n_starts=args.n_starts)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _split(s):
    return [c.strip() for c in s.split(",") if c.strip()] if s else []


def _load_data(args):
    cols = read_records(args.records, _split(args.categorical))
    categorical = _split(args.categorical)
    if args.age_breaks:
        try:
            breaks = [float(b) for b in _split(args.age_breaks)]
        except ValueError:
            raise CliError(f"--age-breaks must be numbers, got {args.age_breaks!r}") from None
        cols["age_group"] = age_groups(cols["age"], breaks)
        categorical.append("age_group")
    design = Design(cols, categorical)
    pop, pop_kw, pop_info = _population(args, cols)
    data = Dataset.from_arrays(cols["time"], cols["status"], cols["age"], design.covariates, pop, **pop_kw)
    return data, design, pop_info


def _init_from_args(args, spec, data, bounds):
    overrides = _parse_assignments(args.init, "--init")
    if not overrides:
        return None
    x = default_init(spec, data, bounds).to_array()
    for name, val in overrides.items():
        if name not in spec.param_names:
            raise CliError(f"unknown parameter in --init: {name!r} (have {spec.param_names})")
        x[spec.param_names.index(name)] = float(val)
    return x


def _profiles_for_fit(args, design: Design, spec: ModelSpec, data: Dataset):
    used = sorted(set(spec.alpha_design) | set(spec.tau_design))
    if args.profile:
        return [(p, design.profile(_parse_assignments([p], "--profile"), used)) for p in args.profile]
    if not used:
        return [("all", {})]
    rows = np.column_stack([data.covariates[c] for c in used])
    uniq = np.unique(rows, axis=0)
    if uniq.shape[0] > MAX_AUTO_PROFILES:
        mean = rows.mean(axis=0)
        return [("mean profile", dict(zip(used, mean.tolist())))]
    out = []
    for r in uniq:
        prof = dict(zip(used, r.tolist()))
        out.append((_label(prof, design), prof))
    return out


def _label(prof, design: Design):
    parts = []
    done = set()
    for col, cat in design.categorical.items():
        keys = [indicator(col, lv) for lv in cat["levels"] if indicator(col, lv) in prof]
        if not keys:
            continue
        on = [lv for lv in cat["levels"] if prof.get(indicator(col, lv)) == 1.0]
        parts.append(f"{col}={on[0] if on else cat['reference']}")
        done.update(keys)
    parts += [f"{k}={_g6(v)}" for k, v in prof.items() if k not in done]
    return ", ".join(parts) if parts else "all"


# ---------------------------------------------------------------- commands

def cmd_fit(args) -> int:
    data, design, pop_info = _load_data(args)
    spec = _spec_from_args(args, design)
    bounds = default_bounds(spec, data)
    init = _init_from_args(args, spec, data, bounds)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            res = fit(data, spec, init=init, bounds=bounds)
        except ValueError as exc:
            raise CliError(str(exc)) from None
    derived = []
    for label, prof in _profiles_for_fit(args, design, spec, data):
        for target in ("cure_fraction", "tneh"):
            d = delta_method_ci(res, target, prof, level=args.level)
            d.profile = {"label": label, **prof}
            derived.append(d)
    res.derived = derived
    report = res.to_dict()
    report["data"] = {"records": str(args.records), "n": data.n, "events": int(data.status.sum()),
                      "censoring_rate": data.censoring_rate}
    report["categorical"] = design.categorical
    report["population"] = pop_info
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    _print_fit(res, derived)
    for w in res.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not res.converged:
        print(f"warning: optimizer did not converge ({res.message})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    if res.boundary_flagged:
        return EXIT_BOUNDARY
    return EXIT_OK


def _print_fit(res: FitResult, derived):
    print(f"n={res.n} events={res.n_events} loglik={_g6(res.loglik)} aic={_g6(res.aic)} "
          f"converged={res.converged} expansions={res.expansions_performed}")
    print(f"{'parameter':<24}{'estimate':>12}{'se':>12}  bound")
    for name, col, est, se in zip(res.names, res.spec.param_columns, res.estimates, res.se):
        hit = res.boundary_hits.get(name) or ""
        print(f"{name + ' (' + col + ')':<24}{_g6(est):>12}{_g6(se):>12}  {hit}")
    for d in derived:
        print(f"{d.target:<14} {d.profile['label']}: {d}")


def _load_report(path):
    try:
        report = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    try:
        return report, FitResult.from_dict(report)
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"{path}: not a fit report ({exc})") from None


def parse_grid(text):
    try:
        t0, t1, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise CliError(f"--grid must be t0:t1:step, got {text!r}") from None
    if not step > 0 or t1 < t0 or t0 < 0:
        raise CliError("--grid needs 0 <= t0 <= t1 and step > 0")
    m = int(math.floor((t1 - t0) / step + 1e-9))
    return t0 + step * np.arange(m + 1)


def cmd_predict(args) -> int:
    report, res = _load_report(args.report)
    grid = parse_grid(args.grid)
    design = Design.from_report(report)
    spec = res.spec
    used = sorted(set(spec.alpha_design) | set(spec.tau_design))
    profiles = args.profile or [""]
    theta = res.theta_hat
    rows = []
    for p in profiles:
        prof = design.profile(_parse_assignments([p], "--profile"), used)
        za, zt = spec.profile_vectors(prof)
        for t in grid:
            lam = float(excess_hazard(t, za, theta, zt)) if t > 0 else _hazard_at_zero(za, theta)
            cum = float(cum_excess_hazard(t, za, theta, zt))
            ns = float(net_survival(t, za, theta, zt))
            if t == 0:
                lo = hi = 1.0
            else:
                ci = delta_method_ci(res, "net_survival", prof, t=float(t), level=args.level)
                lo, hi = ci.lower, ci.upper
            rows.append((p, t, lam, cum, ns, lo, hi))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        multi = len(profiles) > 1
        w.writerow((["profile"] if multi else []) + PREDICT_HEADER)
        for p, *vals in rows:
            w.writerow(([p] if multi else []) + [_g6(v) for v in vals])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _hazard_at_zero(za, theta: ParamVector):
    a = float(np.dot(za, theta.gamma))
    if a < 1:
        return math.inf
    return 1.0 if a == 1 else 0.0


def _sim_config(args) -> SimulationConfig:
    if args.config and args.setting:
        raise CliError("give either --setting or --config, not both")
    if args.config:
        try:
            cfg = SimulationConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise CliError(f"{args.config}: bad simulation config ({exc})") from None
    elif args.setting:
        if args.setting not in SETTINGS:
            raise CliError(f"unknown setting {args.setting}; choose 1, 2 or 3")
        cfg = SETTINGS[args.setting]
    else:
        raise CliError("--setting or --config is required")
    kw = {}
    if args.n is not None:
        kw["n"] = args.n
    if args.seed is not None:
        kw["seed"] = args.seed
    try:
        return cfg.with_(**kw)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    data = simulate_dataset(cfg)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(RECORD_HEADER + ["age_std"])
        for t, s, a, z in zip(data.time, data.status, data.age, data.covariates["age_std"]):
            w.writerow([repr(float(t)), int(s), repr(float(a)), repr(float(z))])
    finally:
        if args.out:
            out.close()
    print(f"simulated {data.n} records, censoring rate {_g6(data.censoring_rate)}", file=sys.stderr)
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _sim_config(args)
    try:
        rep = run_study(cfg, args.B, SIM_SPEC, n_jobs=args.jobs)
    except StudyAborted as exc:
        print(json.dumps(exc.diagnostics[:20], indent=2), file=sys.stderr)
        raise CliError(str(exc)) from None
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.out:
        rep.write_csv(args.out)
    if args.report:
        Path(args.report).write_text(json.dumps({"config": cfg.to_dict(), "report": rep.to_dict()},
                                                indent=2) + "\n")
    print(f"{cfg.name}: n={cfg.n} B={args.B} used={rep.estimates.shape[0]} failed={rep.n_failed} "
          f"censoring={_g6(rep.censoring_rate)}")
    print(f"{'parameter':<10}{'true':>12}{'mean':>12}{'sd':>12}{'mean_se':>12}{'cp':>10}")
    for j, name in enumerate(rep.names):
        print(f"{name:<10}{_g6(rep.true_values[j]):>12}{_g6(rep.mean[j]):>12}{_g6(rep.sd[j]):>12}"
              f"{_g6(rep.mean_se[j]):>12}{_g6(rep.coverage[j]):>10}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.setting or args.config:
        cfg = _sim_config(args)
        res = initial_value_study(cfg, args.K, args.B, SIM_SPEC, init_seed=args.seed or 0)
        truth = cfg.true_theta.to_array()
        out = {
            "schema_version": SCHEMA_VERSION,
            "config": cfg.to_dict(),
            "K": args.K,
            "B": args.B,
            "parameters": res["names"],
            "inits": res["inits"].tolist(),
            "mean_by_init": res["mean_by_init"].tolist(),
            "bias_range": res["bias_range"].tolist(),
            "relative_range": res["relative_range"].tolist(),
            "n_failed": res["n_failed"],
        }
        print(f"{'parameter':<10}{'true':>12}{'bias range':>12}{'relative':>12}")
        for j, name in enumerate(res["names"]):
            print(f"{name:<10}{_g6(truth[j]):>12}{_g6(res['bias_range'][j]):>12}"
                  f"{_g6(res['relative_range'][j]):>12}")
    else:
        if not args.records:
            raise CliError("sweep needs a records file or --setting/--config")
        data, design, _ = _load_data(args)
        spec = _spec_from_args(args, design)
        rep = initial_value_sweep(data, spec, args.K, args.seed if args.seed is not None else 0)
        out = rep.to_dict()
        print(f"{'parameter':<12}{'range':>12}")
        for name, r in zip(rep.names, rep.ranges):
            print(f"{name:<12}{_g6(r):>12}")
        print(f"max loglik gap {_g6(rep.max_loglik_gap)}; failures {len(rep.failures)}")
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_model_flags(p):
    p.add_argument("records", nargs="?" if p.prog.endswith("sweep") else None,
                   help="CSV with header time,status,age,<covariates...>")
    p.add_argument("--weibull-pop", nargs=2, type=float, metavar=("SCALE", "SHAPE"),
                   help="Weibull population hazard in attained age")
    p.add_argument("--lifetable", help="life-table CSV (sex,age,year,rate); records need sex and year")
    p.add_argument("--static-year", action="store_true",
                   help="keep the calendar year at diagnosis when reading the life table")
    p.add_argument("--alpha-cov", default="", help="comma-separated covariates entering alpha")
    p.add_argument("--tau-cov", default="", help="comma-separated covariates entering tau")
    p.add_argument("--categorical", default="",
                   help="comma-separated columns to expand into indicators (most frequent level is the reference)")
    p.add_argument("--age-breaks", default="", help="cut age into groups, adding a categorical age_group column")
    p.add_argument("--bounds", action="append", help="name=lo:hi (repeatable)")
    p.add_argument("--init", action="append", help="name=value (repeatable)")
    p.add_argument("--tau-cap", type=float, default=None, help="upper limit for expanding the eta0 bound")
    p.add_argument("--max-expansions", type=int, default=5)
    p.add_argument("--n-starts", type=int, default=3, help="extra data-driven starting points")


def _add_sim_flags(p):
    p.add_argument("--setting", type=int, help="built-in setting 1, 2 or 3")
    p.add_argument("--config", help="JSON simulation config")
    p.add_argument("--n", type=int, help="sample size")
    p.add_argument("--seed", type=int, help="master seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="betatneh", description="Beta-TNEH excess-hazard cure model")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model to a record file")
    _add_model_flags(p)
    p.add_argument("--profile", action="append", help="k=v[,k=v] covariate profile for derived quantities")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="curves from a fit report")
    p.add_argument("report")
    p.add_argument("--grid", required=True, help="t0:t1:step in years")
    p.add_argument("--profile", action="append", help="k=v[,k=v] covariate profile (repeatable)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="write one simulated dataset")
    _add_sim_flags(p)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="Monte Carlo study of the estimator")
    _add_sim_flags(p)
    p.add_argument("--B", type=int, default=200, help="replications")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="summary CSV path (one row per parameter)")
    p.add_argument("--report", help="JSON report path")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("sweep", help="sensitivity of the fit to the starting point")
    _add_model_flags(p)
    _add_sim_flags(p)
    p.add_argument("--K", type=int, default=10, help="number of starting points")
    p.add_argument("--B", type=int, default=100, help="replications (simulation mode)")
    p.add_argument("--out", help="JSON path")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, LifeTableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
