"""Black-76 utilities, Monte Carlo index vanillas and parameter sensitivity scans."""

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import DomainError, ParamError, RangeError

CALL, PUT = "call", "put"

DEFAULT_MONEYNESS = (0.8, 0.9, 0.95, 1.0, 1.05, 1.1, 1.2)
DEFAULT_MONTHS = tuple(range(1, 13))
SCANNABLE = ("a", "rho", "kappa", "theta", "chi", "rho_v", "v0")


def _sign(callput):
    if callput in (CALL, "c", "C", 1):
        return 1.0
    if callput in (PUT, "p", "P", -1):
        return -1.0
    raise ValueError(f"callput must be 'call' or 'put', got {callput!r}")


def black_price(F, K, t, sigma, df=1.0, callput=CALL):
    """Black-76 price ``df * E[(w (F_T - K))^+]`` for a lognormal forward.

    Vectorised over array inputs.
    """
    w = _sign(callput)
    F, K, t, sigma, df = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (F, K, t, sigma, df)))
    sd = sigma * np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d1 = np.log(F / K) / sd + 0.5 * sd
        value = w * (F * ndtr(w * d1) - K * ndtr(w * (d1 - sd)))
    value = np.where(sd > 0, value, np.maximum(w * (F - K), 0.0))
    out = df * np.maximum(value, 0.0)
    return float(out) if out.ndim == 0 else out


def black_vega(F, K, t, sigma, df=1.0):
    sd = sigma * math.sqrt(t)
    if sd <= 0:
        return 0.0
    d1 = math.log(F / K) / sd + 0.5 * sd
    return df * F * math.sqrt(t) * math.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi)


def implied_vol(price, F, K, t, df=1.0, callput=CALL, tol=1e-10, max_iter=200):
    """Black-76 implied volatility by bracketed Newton with bisection fallback.

    Converges to ``|black_price(sigma) - price| < tol * df * F``. Raises
    :class:`DomainError` when the price violates the no-arbitrage bounds.
    """
    w = _sign(callput)
    price, F, K, t, df = map(float, (price, F, K, t, df))
    if not (F > 0 and K > 0 and t > 0 and 0 < df <= 1):
        raise DomainError("implied_vol needs F, K, t > 0 and df in (0, 1]")
    lower = df * max(w * (F - K), 0.0)
    upper = df * (F if w > 0 else K)
    atol = tol * df * F
    if price < lower - atol or price >= upper:
        raise DomainError(f"price {price} outside no-arbitrage bounds [{lower}, {upper})")
    if price <= lower + atol:
        return 0.0
    lo, hi = 0.0, 1.0
    while black_price(F, K, t, hi, df, callput) < price:
        lo, hi = hi, 2.0 * hi
        if hi > 1e4:
            raise DomainError("implied vol above 1e4; price too close to the upper bound")
    sigma = 0.5 * (lo + hi)
    # start near the Brenner-Subrahmanyam guess when it is inside the bracket
    guess = price / (df * F) * math.sqrt(2 * math.pi / t)
    if lo < guess < hi:
        sigma = guess
    for _ in range(max_iter):
        diff = black_price(F, K, t, sigma, df, callput) - price
        vega = black_vega(F, K, t, sigma, df)
        step = diff / vega if vega > 0 else np.inf
        # price-converged, and also vol-converged where vega is small
        if abs(diff) < atol and (abs(step) < 1e-12 or diff == 0.0):
            return sigma
        if diff > 0:
            hi = sigma
        else:
            lo = sigma
        nxt = sigma - step
        sigma = nxt if lo < nxt < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15 * max(1.0, hi):
            return sigma
    if abs(black_price(F, K, t, sigma, df, callput) - price) < atol:
        return sigma
    raise DomainError(f"implied vol did not converge for price {price}")


# ---------------------------------------------------------------------------
# Index vanillas by Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptionSpec:
    """European option on the index (or a futures contract).

    Give either an absolute ``strike`` or a ``moneyness`` relative to the
    forward; ``expiry`` is a year fraction and ``expiry_date`` the business
    day it falls on.
    """

    expiry: float
    expiry_date: object = None
    strike: float = None
    moneyness: float = None
    callput: str = CALL
    underlying: str = "index"

    def __post_init__(self):
        if not self.expiry > 0:
            raise ParamError("option expiry must be positive")
        if self.strike is None and self.moneyness is None:
            raise ParamError("option needs a strike or a moneyness")
        if self.strike is not None and self.strike < 0:
            raise ParamError("strike must be non-negative")
        _sign(self.callput)

    def strike_for(self, forward):
        return float(self.strike) if self.strike is not None else float(self.moneyness) * forward


def index_option_specs(valuation_date, months=DEFAULT_MONTHS, moneyness=DEFAULT_MONEYNESS,
                       calendar=None):
    """Calls on a months x moneyness grid with business-day expiries."""
    from .market_data import expiry_after, year_fraction

    specs = []
    for m in months:
        exp = expiry_after(valuation_date, m, calendar)
        t = year_fraction(valuation_date, exp)
        specs.extend(OptionSpec(t, exp, moneyness=x) for x in moneyness)
    return specs


def _expiry_row(index_paths, spec):
    if spec.expiry_date is not None:
        try:
            return index_paths.index_at(spec.expiry_date)
        except RangeError:
            raise RangeError(f"expiry {spec.expiry_date} not on the simulated index grid") from None
    hit = np.flatnonzero(np.abs(index_paths.times - spec.expiry) < 1e-9)
    if hit.size == 0:
        raise RangeError(f"expiry t={spec.expiry} not on the simulated index grid")
    return int(hit[0])


def price_index_vanillas(index_paths, specs, discount):
    """Discounted Monte Carlo prices and standard errors of index options.

    Moneyness is taken relative to ``I_0`` (the index is a martingale).
    """
    from .market_data import discount_factor

    prices = np.empty(len(specs))
    stderr = np.empty(len(specs))
    n = index_paths.values.shape[1]
    for j, spec in enumerate(specs):
        I_T = index_paths.values[_expiry_row(index_paths, spec)]
        df = discount_factor(discount, spec.expiry)
        pay = np.maximum(_sign(spec.callput) * (I_T - spec.strike_for(index_paths.i0)), 0.0)
        prices[j] = df * pay.mean()
        stderr[j] = df * pay.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    return prices, stderr


def implied_vols(prices, specs, forward, discount, stderr=None):
    """Black implied vols of option prices; NaN where inversion fails.

    With ``stderr`` also returns vol standard errors ``stderr / vega``.
    """
    from .market_data import discount_factor

    vols = np.full(len(specs), np.nan)
    verr = np.full(len(specs), np.nan)
    for j, spec in enumerate(specs):
        K = spec.strike_for(forward)
        df = discount_factor(discount, spec.expiry)
        try:
            vols[j] = implied_vol(prices[j], forward, K, spec.expiry, df, spec.callput)
        except DomainError:
            continue
        if stderr is not None:
            vega = black_vega(forward, K, spec.expiry, max(vols[j], 1e-4), df)
            verr[j] = stderr[j] / vega if vega > 0 else np.nan
    return (vols, verr) if stderr is not None else vols


# ---------------------------------------------------------------------------
# Sensitivity scans
# ---------------------------------------------------------------------------

FORMAT_VERSION = 1


@dataclass
class SensitivityReport:
    """ATM term structures and 1-year smiles per scanned parameter value.

    Arrays are indexed ``[value, maturity]`` and ``[value, moneyness]``;
    vols are in absolute units (0.25 = 25%).
    """

    param: str
    values: list
    months: list
    moneyness: list
    atm_vols: np.ndarray
    atm_stderr: np.ndarray
    smile_vols: np.ndarray
    smile_stderr: np.ndarray
    smile_month: int = 12
    seed: int = 0
    n_particles: int = 0
    base: dict = field(default_factory=dict)

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("atm_vols", "atm_stderr", "smile_vols", "smile_stderr"):
            d[k] = np.asarray(d[k]).tolist()
        d["format_version"] = FORMAT_VERSION
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, allow_nan=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d.pop("format_version", None)
        for k in ("atm_vols", "atm_stderr", "smile_vols", "smile_stderr"):
            d[k] = np.array(d[k], dtype=float)
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def write_dat(self, directory):
        """One ``atm_<param>=<v>.dat`` (months, vol) and one
        ``smile_<param>=<v>.dat`` (moneyness, vol) file per scanned value.
        Returns the written paths."""
        import os

        os.makedirs(directory, exist_ok=True)
        paths = []
        for i, v in enumerate(self.values):
            for stem, xs, ys in (("atm", self.months, self.atm_vols[i]),
                                 ("smile", self.moneyness, self.smile_vols[i])):
                path = os.path.join(directory, f"{stem}_{self.param}={v:g}.dat")
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write("x y\n")
                    for x, y in zip(xs, ys):
                        fh.write(f"{x:g} {y:.10g}\n")
                paths.append(path)
        return paths


def _eta_for(eta, a):
    # a one-argument callable is a factory a -> surface
    return eta(a) if _takes_one(eta) else eta


def _takes_one(fn):
    import inspect

    try:
        return len(inspect.signature(fn).parameters) == 1
    except (TypeError, ValueError):
        return False


def sensitivity_scan(base, eta, curve, schedule, param, values, config, discount,
                     months=DEFAULT_MONTHS, moneyness=DEFAULT_MONEYNESS, smile_month=12,
                     i0=100.0):
    """Index ATM vol term structure and smile while varying one parameter.

    ``eta`` is a local vol surface, or a one-argument callable mapping ``a``
    to a surface (needed when scanning ``a``). Every value reuses
    ``config.seed`` so differences between curves are not MC noise.
    """
    from .slv_mc import PiecewiseRho, simulate_index

    if param not in SCANNABLE:
        raise ParamError(f"cannot scan {param!r}; choose one of {', '.join(SCANNABLE)}")
    values = [float(v) for v in values]
    if not values:
        raise ParamError("no values to scan")
    if 1.0 not in moneyness:
        raise ParamError("moneyness grid must contain 1.0 for the ATM curve")
    if smile_month not in months:
        months = tuple(sorted(set(months) | {smile_month}))
    specs = index_option_specs(curve.valuation_date, months, moneyness)
    dates = sorted({s.expiry_date for s in specs})
    atm_col = list(moneyness).index(1.0)
    nm = len(moneyness)
    atm, atm_se = np.empty((len(values), len(months))), np.empty((len(values), len(months)))
    smile, smile_se = np.empty((len(values), nm)), np.empty((len(values), nm))
    row = list(months).index(smile_month)
    for i, v in enumerate(values):
        kw = {param: PiecewiseRho((), (v,)) if param == "rho" and isinstance(base.rho, PiecewiseRho) else v}
        params = base.with_values(**kw)
        surface = _eta_for(eta, params.a)
        paths = simulate_index(params, surface, curve, schedule, config, dates[-1], i0, dates)
        prices, se = price_index_vanillas(paths, specs, discount)
        vols, verr = implied_vols(prices, specs, i0, discount, se)
        vols, verr = vols.reshape(len(months), nm), verr.reshape(len(months), nm)
        atm[i], atm_se[i] = vols[:, atm_col], verr[:, atm_col]
        smile[i], smile_se[i] = vols[row], verr[row]
    return SensitivityReport(param, values, list(months), list(moneyness), atm, atm_se, smile, smile_se,
                             smile_month, config.seed, config.n_particles, base.as_dict())
