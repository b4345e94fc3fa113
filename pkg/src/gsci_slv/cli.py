"""Batch command-line front end.

Subcommands: ``calibrate-lv``, ``calibrate-index``, ``sensitivity`` and
``price``. Options may also come from a TOML file given with ``--config``;
keys are option names with dashes or underscores, at top level or inside
any table. Command-line flags win over the file.

Exit codes: 0 ok, 2 data, 3 numerics, 4 calibration, 64 usage.
"""

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .errors import (CalendarError, CalibrationError, ConfigError, DataError, NumericsError,
                     ParamError, RangeError, SLVError)

EXIT_OK, EXIT_DATA, EXIT_NUMERICS, EXIT_CALIBRATION, EXIT_USAGE = 0, 2, 3, 4, 64
FORMAT_VERSION = 1

log = logging.getLogger("gsci_slv")


class UsageError(SLVError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Argument definitions
# ---------------------------------------------------------------------------

# option -> default, applied after the config file so flags > file > default
DEFAULTS = {
    "index_level": 100.0, "particles": 50000, "steps_per_year": 250, "bins": 200,
    "bandwidth": "auto", "global_budget": 300, "local_budget": 200, "loss_p": 2.0,
    "loss_mode": "normalized", "variance_mode": "per_factor", "seed": 0, "threads": 1,
    "months": "1,2,3,4,5,6,7,8,9,10,11,12", "moneyness": "0.8,0.9,0.95,1,1.05,1.1,1.2",
    "smile_month": 12, "pde_points": 200, "pde_steps": 100, "k_max": 5.0,
}
MODEL_KEYS = ("kappa", "theta", "chi", "rho_v", "v0", "rho")


def _common(p):
    p.add_argument("--config", help="TOML file with option values")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--threads", type=int, help="parallel objective evaluations (results do not depend on it)")
    p.add_argument("--dry-run", action="store_true", help="validate inputs, write nothing")
    p.add_argument("--out", help="output directory (or file for price)")
    p.add_argument("--valuation-date", help="curve valuation date (ISO)")
    p.add_argument("--curve", help="futures curve CSV (maturity,price)")
    p.add_argument("--discount", help="discount curve CSV (t,df)")
    p.add_argument("--holidays", help="file with one ISO holiday per line")
    p.add_argument("--index-level", type=float, help="index level I_0 (default 100)")
    p.add_argument("-v", "--verbose", action="store_true")


def _grid_args(p):
    p.add_argument("--pde-points", type=int, help="strike nodes of the PDE grid")
    p.add_argument("--pde-steps", type=int, help="PDE time steps per year")
    p.add_argument("--k-max", type=float, help="upper normalised strike of the PDE grid")


def _sim_args(p):
    p.add_argument("--futures-quotes", help="futures option quote CSV")
    p.add_argument("--eta", help="local vol surface JSON (fixes a to the surface's value)")
    p.add_argument("--particles", type=int, help="particle count N")
    p.add_argument("--steps-per-year", type=int, help="time steps per year M")
    p.add_argument("--bins", type=int, help="kernel bins")
    p.add_argument("--bandwidth", help="kernel bandwidth or 'auto'")
    p.add_argument("--variance-mode", choices=("shared", "per_factor"))
    p.add_argument("--a", type=float, help="spot mean reversion a")
    for k in MODEL_KEYS:
        p.add_argument(f"--{k.replace('_', '-')}", type=float, dest=k)
    _grid_args(p)


def build_parser():
    parser = _Parser(prog="gsci-slv", description="Two-factor SLV model for commodity index options")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("calibrate-lv", help="fit eta to futures vanillas")
    _common(p)
    p.add_argument("--quotes", help="futures option quote CSV")
    p.add_argument("--a", type=float, help="spot mean reversion a (default 0.3)")
    _grid_args(p)

    p = sub.add_parser("calibrate-index", help="fit (a, chi, rho_v, rho) to index vanillas")
    _common(p)
    _sim_args(p)
    p.add_argument("--index-quotes", help="index option quote CSV with two quote dates")
    p.add_argument("--global-budget", type=int, help="ESCH evaluations (0 skips ESCH)")
    p.add_argument("--local-budget", type=int, help="Subplex evaluations")
    p.add_argument("--warm-start", help="previous report; Subplex-only refinement from its params")
    p.add_argument("--random-p0", action="store_true", help="draw p0 uniformly in the bounds")
    p.add_argument("--p0", help="explicit start a,chi,rho_v,rho")
    p.add_argument("--loss-p", type=float, help="p-norm exponent")
    p.add_argument("--loss-mode", choices=("plain", "normalized"))

    p = sub.add_parser("sensitivity", help="ATM term structure and 1y smile per parameter value")
    _common(p)
    _sim_args(p)
    p.add_argument("--param", help="parameter to scan")
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--months", help="comma-separated maturities in months")
    p.add_argument("--moneyness", help="comma-separated moneyness grid")
    p.add_argument("--smile-month", type=int)

    p = sub.add_parser("price", help="Monte Carlo prices of index options")
    _common(p)
    _sim_args(p)
    p.add_argument("--specs", help="option CSV: expiry,strike_or_moneyness,strike_type,callput")
    p.add_argument("--params", help="calibration report JSON supplying a, chi, rho_v, rho")
    return parser


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _load_toml(path):
    try:
        import tomllib as tomli
    except ModuleNotFoundError:     # Python < 3.11
        import tomli

    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file {path} not found") from None
    except tomli.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    flat = {}

    def walk(d):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(v)
            else:
                flat[k.replace("-", "_")] = v
    walk(doc)
    return flat


def resolve(args):
    """Merge flags, config file and defaults (in that priority)."""
    cfg = _load_toml(args.config) if args.config else {}
    known = vars(args)
    for k, v in cfg.items():
        if k not in known:
            raise UsageError(f"unknown config key {k!r} for {args.command}")
        if known[k] is None or known[k] is False:
            setattr(args, k, v)
    for k, v in DEFAULTS.items():
        if k in known and getattr(args, k) is None:
            setattr(args, k, v)
    return args


def _floats(text, what):
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [t for t in str(text).split(",") if t.strip()]
    try:
        return [float(t) for t in items]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers") from None


def _require(args, *names):
    missing = [n for n in names if not getattr(args, n, None)]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _exists(path):
    if not os.path.exists(path):
        raise DataError(f"input file {path} not found")
    return path


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------

def _market(args):
    from .market_data import BusinessCalendar, load_discount_curve, load_futures_curve

    _require(args, "valuation_date", "curve", "discount")
    curve = load_futures_curve(_exists(args.curve), args.valuation_date)
    discount = load_discount_curve(_exists(args.discount))
    cal = BusinessCalendar.from_file(_exists(args.holidays)) if args.holidays else BusinessCalendar()
    return curve, discount, cal


def _schedule(curve, calendar, end):
    from .market_data import build_roll_schedule, default_maturity_map

    mm = default_maturity_map(curve, calendar, curve.valuation_date, end)
    return build_roll_schedule(calendar, curve.valuation_date, end, mm)


def _pde_grid(args):
    from .dupire_lv import PDEGrid

    return PDEGrid(k_max=float(args.k_max), n_k=int(args.pde_points), steps_per_year=int(args.pde_steps))


def _sim_config(args):
    from .rng import derive_seed
    from .slv_mc import SimConfig

    bw = args.bandwidth if args.bandwidth == "auto" else float(args.bandwidth)
    return SimConfig(n_particles=int(args.particles), steps_per_year=int(args.steps_per_year),
                     bandwidth=bw, seed=derive_seed(args.seed, "particles"), bins=int(args.bins))


def _base_params(args, overrides=None):
    from .slv_mc import BASELINE

    kw = {k: float(getattr(args, k)) for k in MODEL_KEYS if getattr(args, k, None) is not None}
    if getattr(args, "a", None) is not None:
        kw["a"] = float(args.a)
    kw.update(overrides or {})
    kw["variance_mode"] = args.variance_mode
    return BASELINE.with_values(**kw)


def _eta_source(args, curve, discount, calendar):
    """A surface (when --eta is given) or a factory a -> calibrated surface."""
    from .dupire_lv import LocalVolSurface, LVConfig, calibrate_local_vol
    from .market_data import load_quotes

    if args.eta:
        surface = LocalVolSurface.load(_exists(args.eta))
        if surface.a is not None and args.a is not None and abs(surface.a - float(args.a)) > 1e-12:
            raise UsageError(f"--a {args.a} disagrees with the surface's a={surface.a}")
        return surface, surface.a
    _require(args, "futures_quotes")
    quotes = load_quotes(_exists(args.futures_quotes), curve, discount, args.index_level, calendar)
    cache = {}
    config = LVConfig(grid=_pde_grid(args))

    def factory(a):
        key = round(float(a), 4)
        if key not in cache:
            cache[key] = calibrate_local_vol(quotes, curve, discount, key, config)
        return cache[key]
    return factory, None


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _outdir(args):
    _require(args, "out")
    if not args.dry_run:
        os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_calibrate_lv(args):
    from .dupire_lv import LVConfig, calibrate_local_vol
    from .market_data import load_quotes

    _require(args, "quotes")
    curve, discount, cal = _market(args)
    quotes = load_quotes(_exists(args.quotes), curve, discount, args.index_level, cal)
    out = _outdir(args)
    if args.dry_run:
        print(f"dry run: {len(quotes)} quotes, {len(curve)} contracts; nothing written")
        return EXIT_OK
    a = 0.3 if args.a is None else float(args.a)
    surface = calibrate_local_vol(quotes, curve, discount, a, LVConfig(grid=_pde_grid(args)))
    surface.save(os.path.join(out, "eta.json"))
    res = surface.diagnostics["residuals"]
    with open(os.path.join(out, "residuals.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quote", "expiry", "strike", "residual"])
        for i, q in enumerate(quotes.quotes):
            w.writerow([i, repr(q.expiry), repr(q.strike), repr(float(res[i]))])
    print(f"eta written to {os.path.join(out, 'eta.json')}; max residual {np.nanmax(np.abs(res)):.3g}")
    return EXIT_OK


def cmd_calibrate_index(args):
    from .calibrator import (DEFAULT_BOUNDS, FIXED_PARAMS, REDUCED_NAMES, CalibrationReport,
                             IndexObjective, LossSpec, hybrid_calibrate)
    from .dupire_lv import LVConfig
    from .market_data import load_quotes
    from .rng import derive_seed

    if args.warm_start and (args.random_p0 or args.p0):
        raise UsageError("--warm-start cannot be combined with --random-p0 or --p0")
    _require(args, "index_quotes")
    curve, discount, cal = _market(args)
    index_quotes = load_quotes(_exists(args.index_quotes), curve, discount, args.index_level, cal)
    if not index_quotes.snapshots and args.loss_mode == "normalized":
        raise DataError("normalized loss needs index quotes on exactly two quote dates")
    futures_quotes = None
    if args.eta:
        eta, _ = _eta_source(args, curve, discount, cal)
    else:
        _require(args, "futures_quotes")
        eta = None
        futures_quotes = load_quotes(_exists(args.futures_quotes), curve, discount, args.index_level, cal)
    names, fixed = list(REDUCED_NAMES), dict(FIXED_PARAMS)
    if args.eta:
        # a is pinned by the supplied surface
        names.remove("a")
        fixed["a"] = eta.a if eta.a is not None else float(args.a)
    p0 = None
    global_budget = int(args.global_budget)
    if args.warm_start:
        prev = CalibrationReport.load(_exists(args.warm_start))
        try:
            p0 = [prev.params[k] for k in names]
        except KeyError as exc:
            raise DataError(f"warm-start report lacks parameter {exc}") from None
        global_budget = 0
    elif args.p0:
        p0 = _floats(args.p0, "--p0")
        if len(p0) != len(names):
            raise UsageError(f"--p0 needs {len(names)} values: {','.join(names)}")
    end = max(q.expiry_date for q in index_quotes.quotes)
    schedule = _schedule(curve, cal, end)
    objective = IndexObjective(index_quotes, futures_quotes, curve, discount, schedule, _sim_config(args),
                               LossSpec(float(args.loss_p), args.loss_mode), names=names, fixed=fixed,
                               lv_config=LVConfig(grid=_pde_grid(args)), i0=args.index_level,
                               variance_mode=args.variance_mode, eta=eta)
    bounds = np.array([DEFAULT_BOUNDS[k] for k in names])
    out = _outdir(args)
    if args.dry_run:
        print(f"dry run: {len(index_quotes)} index quotes, budgets {global_budget}/{args.local_budget}; nothing written")
        return EXIT_OK
    report = hybrid_calibrate(objective, bounds, seed=derive_seed(args.seed, "optimizer"), p0=p0, names=names,
                              global_budget=global_budget, local_budget=int(args.local_budget), fixed=fixed,
                              threads=int(args.threads))
    report.seed = int(args.seed)
    report.quote_files = [f for f in (args.futures_quotes, args.index_quotes) if f]
    report.eta_file = args.eta
    path = os.path.join(out, "calibration.json")
    report.save(path)
    print(f"report written to {path}: {json.dumps(report.params)}")
    return EXIT_OK


def cmd_sensitivity(args):
    from .pricing import SCANNABLE, sensitivity_scan

    if not args.param or args.param not in SCANNABLE:
        raise UsageError(f"--param must be one of {', '.join(SCANNABLE)}")
    values = _floats(args.values or "", "--values")
    if not values:
        raise UsageError("--values needs at least one value")
    months = [int(m) for m in _floats(args.months, "--months")]
    moneyness = _floats(args.moneyness, "--moneyness")
    curve, discount, cal = _market(args)
    eta, _ = _eta_source(args, curve, discount, cal)
    base = _base_params(args, {"a": eta.a} if hasattr(eta, "time_knots") and eta.a is not None else None)
    if args.param == "a" and hasattr(eta, "time_knots"):
        raise UsageError("scanning a needs --futures-quotes so eta can be refitted per a")
    for v in values:
        base.with_values(**{args.param: v})    # ParamError before any work
    from .market_data import expiry_after
    end = expiry_after(curve.valuation_date, max(months + [int(args.smile_month)]), cal)
    schedule = _schedule(curve, cal, end)
    out = _outdir(args)
    if args.dry_run:
        print(f"dry run: scan {args.param} over {values}; nothing written")
        return EXIT_OK
    report = sensitivity_scan(base, eta, curve, schedule, args.param, values, _sim_config(args), discount,
                              months, moneyness, int(args.smile_month), args.index_level)
    report.save(os.path.join(out, f"sensitivity_{args.param}.json"))
    paths = report.write_dat(out)
    print(f"wrote {len(paths)} .dat files to {out}")
    return EXIT_OK


def _read_specs(path, curve, calendar):
    from .market_data import _parse_expiry
    from .pricing import OptionSpec

    specs = []
    with open(_exists(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    need = {"expiry", "strike_or_moneyness", "strike_type", "callput"}
    if not rows or not need <= set(rows[0]):
        raise DataError(f"{path}: needs columns {', '.join(sorted(need))}")
    for i, row in enumerate(rows, start=2):
        try:
            t, date = _parse_expiry(row["expiry"], curve.valuation_date, calendar)
            level = float(row["strike_or_moneyness"])
        except (ValueError, SLVError) as exc:
            raise DataError(f"{path} row {i}: {exc}") from None
        if date is None:
            raise DataError(f"{path} row {i}: expiry must be a date or tenor")
        kind = row["strike_type"].strip().lower()
        if kind not in ("strike", "moneyness"):
            raise DataError(f"{path} row {i}: strike_type must be strike or moneyness")
        try:
            specs.append(OptionSpec(t, date, strike=level if kind == "strike" else None,
                                    moneyness=level if kind == "moneyness" else None,
                                    callput=row["callput"].strip().lower()))
        except (ValueError, ParamError) as exc:
            raise DataError(f"{path} row {i}: {exc}") from None
    return specs


def cmd_price(args):
    from .calibrator import CalibrationReport
    from .pricing import implied_vols, price_index_vanillas
    from .slv_mc import simulate_index

    _require(args, "specs")
    curve, discount, cal = _market(args)
    specs = _read_specs(args.specs, curve, cal)
    overrides = {}
    if args.params:
        overrides = dict(CalibrationReport.load(_exists(args.params)).params)
    eta, a_fixed = _eta_source(args, curve, discount, cal)
    if a_fixed is not None:
        overrides["a"] = a_fixed
    params = _base_params(args, overrides)
    surface = eta(params.a) if not hasattr(eta, "time_knots") else eta
    end = max(s.expiry_date for s in specs)
    if end > curve.maturities[-1]:
        raise RangeError(f"option expiry {end} beyond the last futures maturity")
    schedule = _schedule(curve, cal, end)
    _require(args, "out")
    if args.dry_run:
        print(f"dry run: {len(specs)} options up to {end}; nothing written")
        return EXIT_OK
    dates = sorted({s.expiry_date for s in specs})
    paths = simulate_index(params, surface, curve, schedule, _sim_config(args), end, args.index_level, dates)
    prices, se = price_index_vanillas(paths, specs, discount)
    vols = implied_vols(prices, specs, args.index_level, discount)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["expiry", "strike", "callput", "price", "stderr", "implied_vol"])
        for s, p, e, v in zip(specs, prices, se, vols):
            w.writerow([s.expiry_date.isoformat(), repr(s.strike_for(args.index_level)), s.callput,
                        repr(float(p)), repr(float(e)), repr(float(v))])
    print(f"priced {len(specs)} options into {args.out}")
    return EXIT_OK


COMMANDS = {"calibrate-lv": cmd_calibrate_lv, "calibrate-index": cmd_calibrate_index,
            "sensitivity": cmd_sensitivity, "price": cmd_price}


def _glue_values(argv):
    # argparse reads "-1,1" as a flag, so attach a list that starts with "-"
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--values":
            nxt = next(it, None)
            if nxt is not None and nxt.startswith("-") and not nxt.startswith("--"):
                out.append(f"--values={nxt}")
                continue
            out.append(tok)
            if nxt is not None:
                out.append(nxt)
            continue
        out.append(tok)
    return out


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(_glue_values(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        resolve(args)
        if args.threads is not None and int(args.threads) < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](args)
    except (UsageError, ParamError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, RangeError, CalendarError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION


if __name__ == "__main__":
    sys.exit(main())
