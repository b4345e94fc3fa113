"""Synthetic market data for tests, notebooks and the shipped fixtures.

Nothing here is market data: the curve only mimics the shape of a WTI
futures curve in mid-December 2019 (monthly contracts, mild
backwardation), and quotes are produced by this package's own models.
"""

import datetime as dt

import numpy as np

from .market_data import (ON_FUTURES, ON_INDEX, BusinessCalendar, DiscountCurve, FuturesCurve,
                          QuoteSet, VanillaQuote, add_months, build_roll_schedule,
                          default_maturity_map, discount_factor, expiry_after, year_fraction)

VALUATION = dt.date(2019, 12, 16)
NOV_DATE = dt.date(2019, 11, 15)
DEC_DATE = dt.date(2019, 12, 16)

# parameters used to generate the synthetic index quotes
TRUTH = {"a": 0.267419, "rho": 0.86381, "chi": 0.0287296, "rho_v": -0.18058}


def wti_like_curve(valuation=VALUATION, n=18, front=60.2, slope=-0.45, curvature=0.012):
    """Monthly contracts maturing around the 20th, starting the month after ``valuation``."""
    cal = BusinessCalendar()
    first = add_months(valuation.replace(day=20), 1)
    mats = tuple(cal.roll_forward(add_months(first, i)) for i in range(n))
    i = np.arange(n)
    prices = front + slope * i + curvature * i ** 2
    return FuturesCurve(valuation, mats, tuple(float(p) for p in prices))


def flat_discount(rate=0.017, horizon=30.0):
    return DiscountCurve.flat(rate, horizon)


def schedule_for(curve, end=None, calendar=None):
    """Roll schedule from the valuation date to ``end`` (default: 13 months out)."""
    cal = calendar or BusinessCalendar()
    end = end or add_months(curve.valuation_date, 13)
    mm = default_maturity_map(curve, cal, curve.valuation_date, end)
    return build_roll_schedule(cal, curve.valuation_date, end, mm)


def option_expiry(curve, months, calendar=None):
    """Business-day expiry ``months`` after valuation."""
    return expiry_after(curve.valuation_date, months, calendar)


def underlying_for(curve, expiry):
    """First contract maturing strictly after ``expiry``."""
    for m in curve.maturities:
        if m > expiry:
            return m
    raise ValueError(f"no contract matures after {expiry}")


def skew_vol(moneyness, t, atm=0.32, skew=-0.12, smile=0.25, term=-0.03):
    """Smooth Black vol smile used for futures quotes."""
    x = np.log(moneyness)
    return atm + term * np.sqrt(t) + skew * x + smile * x ** 2


def futures_quotes(curve, discount, months=(3, 6, 9, 12), moneyness=(0.8, 0.9, 1.0, 1.1, 1.2),
                   vol=skew_vol, pricer=None):
    """Futures call quotes from a Black smile or from a model.

    ``pricer(t, maturity_date, K)`` overrides the Black price when given;
    quotes are then of type ``price``.
    """
    from .pricing import black_price

    out = []
    for m in months:
        exp = option_expiry(curve, m)
        und = underlying_for(curve, exp)
        t = year_fraction(curve.valuation_date, exp)
        F = curve.price(und)
        df = discount_factor(discount, t)
        for x in moneyness:
            K = x * F
            if pricer is None:
                sigma = float(vol(x, t))
                out.append(VanillaQuote(ON_FUTURES, t, K, "vol", sigma, black_price(F, K, t, sigma, df),
                                        x, und, exp, curve.valuation_date))
            else:
                p = float(pricer(t, und, K))
                out.append(VanillaQuote(ON_FUTURES, t, K, "price", p, p, x, und, exp,
                                        curve.valuation_date))
    return QuoteSet(tuple(out))


def flat_eta_quotes(curve, discount, eta, a, months=(3, 6, 12), moneyness=(0.8, 0.9, 1.0, 1.1, 1.2),
                    grid=None):
    """Futures quotes priced by the extended Dupire PDE with constant ``eta``."""
    from .dupire_lv import PDEGrid, LocalVolSurface, solve_normalized_calls, vanilla_price_on_futures

    grid = grid or PDEGrid(k_max=5.0, n_k=400, steps_per_year=400)
    times = [year_fraction(curve.valuation_date, option_expiry(curve, m)) for m in months]
    sol = solve_normalized_calls(LocalVolSurface.flat(eta, a), a, grid, horizon=max(times),
                                 extra_times=times)
    return futures_quotes(curve, discount, months, moneyness,
                          pricer=lambda t, T, K: vanilla_price_on_futures(sol, t, T, K, curve, discount))


def index_snapshots(model_prices, specs, half_width=0.02, i0=100.0):
    """Two index quote snapshots bracketing ``model_prices``.

    The November snapshot sits ``half_width`` (relative) below the model,
    the December one the same distance above, so the snapshot mean equals
    the model and the normalised loss vanishes there.
    """
    nov, dec = [], []
    for p, s in zip(model_prices, specs):
        for date, sign, bucket in ((NOV_DATE, -1.0, nov), (DEC_DATE, 1.0, dec)):
            v = float(p) * (1.0 + sign * half_width)
            bucket.append(VanillaQuote(ON_INDEX, s.expiry, s.moneyness * i0, "price", v, v,
                                       s.moneyness, None, s.expiry_date, date))
    return QuoteSet.from_snapshots(nov, dec)


def write_fixtures(directory, n_particles=50000, seed=2024):
    """Write the synthetic curve, discount curve and quote files to ``directory``.

    Index quotes are Monte Carlo prices at :data:`TRUTH` (with ``kappa``,
    ``theta``, ``v0`` = 1) bracketed by two snapshots; generating them costs
    one full simulation.
    """
    import os

    from .calibrator import REDUCED_NAMES, IndexObjective
    from .market_data import write_discount_curve, write_futures_curve, write_quotes
    from .pricing import index_option_specs
    from .slv_mc import SimConfig

    os.makedirs(directory, exist_ok=True)
    curve, disc = wti_like_curve(), flat_discount()
    write_futures_curve(curve, os.path.join(directory, "curve.csv"))
    write_discount_curve(disc, os.path.join(directory, "discount.csv"))
    fq = futures_quotes(curve, disc)
    write_quotes(fq.quotes, os.path.join(directory, "futures_quotes.csv"))
    flat = flat_eta_quotes(curve, disc, 0.25, 0.3)
    write_quotes(flat.quotes, os.path.join(directory, "futures_quotes_flat25.csv"))
    specs = index_option_specs(curve.valuation_date)
    placeholder = index_snapshots(np.ones(len(specs)), specs)
    gen = IndexObjective(placeholder, fq, curve, disc, schedule_for(curve),
                         SimConfig(n_particles=n_particles, seed=seed))
    prices, _ = gen.model_prices([TRUTH[k] for k in REDUCED_NAMES])
    snaps = index_snapshots(prices, specs)
    write_quotes(snaps.snapshots[0] + snaps.snapshots[1], os.path.join(directory, "index_quotes.csv"))
    return directory
