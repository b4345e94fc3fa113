"""Local volatility of the normalised spot and its extended Dupire PDE.

The normalised spot follows ``ds = a (1 - s) dt + s eta(t, s) dW`` with
``s_0 = 1``. Futures are deterministic functions of it,
``F(t, T) = F_0(T) (1 - (1 - s_t) exp(-a (T - t)))``, so every futures
vanilla is a rescaled call on ``s`` at an effective strike. Normalised calls
``c(t, k) = E[(s_t - k)^+]`` solve

    dc/dt = -a c - a (1 - k) dc/dk + 0.5 k^2 eta(t, k)^2 d2c/dk2,

which is integrated forward from ``c(0, k) = (1 - k)^+``.
"""

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .errors import CalibrationError, ConfigError, DataError, DomainError, NumericsError, RangeError
from .market_data import ON_FUTURES, discount_factor, to_date, year_fraction

log = logging.getLogger(__name__)

ETA_CAP = 5.0
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Surface
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalVolSurface:
    """eta(t, k) on a time/strike lattice.

    Piecewise-constant and left-continuous in time (knot ``t_m`` governs
    ``(t_{m-1}, t_m]``), piecewise-linear in strike, flat beyond both ends.
    """

    time_knots: np.ndarray
    strike_knots: np.ndarray
    values: np.ndarray
    a: float = None
    cap: float = ETA_CAP
    diagnostics: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        tk = np.atleast_1d(np.asarray(self.time_knots, dtype=float))
        kk = np.atleast_1d(np.asarray(self.strike_knots, dtype=float))
        vals = np.asarray(self.values, dtype=float).reshape(tk.size, kk.size)
        if np.any(np.diff(tk) <= 0) or np.any(np.diff(kk) <= 0):
            raise ConfigError("surface knots must be strictly ascending")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0) or np.any(vals > self.cap):
            raise ConfigError(f"local vol values must lie in (0, {self.cap}]")
        for name, arr in (("time_knots", tk), ("strike_knots", kk), ("values", vals)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        h = np.diff(kk)
        uniform = kk.size > 1 and np.allclose(h, h[0], rtol=1e-9, atol=0.0)
        object.__setattr__(self, "_step", float(h[0]) if uniform else None)

    @classmethod
    def flat(cls, sigma, a=None, horizon=1.0):
        return cls(np.array([horizon]), np.array([1.0]), np.array([[sigma]]), a)

    def slice_index(self, t):
        """Index of the time knot whose interval contains ``t``."""
        return np.minimum(np.searchsorted(self.time_knots, t, side="left"), self.time_knots.size - 1)

    def slice(self, t):
        return self.values[int(self.slice_index(t))]

    def __call__(self, t, k):
        """eta at scalar time ``t`` and strike(s) ``k``."""
        row = self.slice(t)
        if self._step is None or np.ndim(k) == 0:
            out = np.interp(k, self.strike_knots, row)
            return float(out) if np.ndim(out) == 0 else out
        # equally spaced knots: locate cells arithmetically instead of by search
        x = (np.asarray(k, dtype=float) - self.strike_knots[0]) * (1.0 / self._step)
        np.clip(x, 0.0, row.size - 1.0, out=x)
        left = np.minimum(x.astype(np.intp), row.size - 2)
        slope = np.diff(row)
        return np.take(row, left) + (x - left) * np.take(slope, left)

    def to_json(self):
        return json.dumps({
            "format_version": FORMAT_VERSION,
            "a": self.a,
            "time_knots": self.time_knots.tolist(),
            "strike_knots": self.strike_knots.tolist(),
            "values": self.values.tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        try:
            return cls(np.array(d["time_knots"]), np.array(d["strike_knots"]),
                       np.array(d["values"]), d.get("a"))
        except KeyError as exc:
            raise DataError(f"local vol JSON lacks field {exc}") from None

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


# ---------------------------------------------------------------------------
# Futures <-> normalised spot maps
# ---------------------------------------------------------------------------

def _maturity(curve, T):
    """(F_0(T), T in years) for a date, curve index or year fraction."""
    if isinstance(T, (int, np.integer)) and not isinstance(T, bool):
        return float(curve.prices[T]), float(curve.times[T])
    if isinstance(T, (float, np.floating)):
        return curve.price(float(T)), float(T)
    date = to_date(T)
    return curve.price(date), year_fraction(curve.valuation_date, date)


def effective_strike(t, T, K, curve, a):
    """Normalised-spot strike ``k_F = 1 - exp(a (T - t)) (1 - K / F_0(T))``."""
    F0, T = _maturity(curve, T)
    if not (T >= t - 1e-12 and t >= 0):
        raise DomainError("effective strike needs 0 <= t <= T")
    if a < 0:
        raise DomainError("mean reversion a must be non-negative")
    return 1.0 - np.exp(a * (T - t)) * (1.0 - np.asarray(K, dtype=float) / F0)


def futures_from_spot(s, t, T, curve, a):
    """LV futures price ``F_0(T) (1 - (1 - s) exp(-a (T - t)))``."""
    F0, T = _maturity(curve, T)
    if T < t - 1e-12:
        raise DomainError("futures_from_spot needs t <= T")
    return F0 * (1.0 - (1.0 - np.asarray(s, dtype=float)) * np.exp(-a * (T - t)))


def local_vol_futures(eta, t, T, K, curve, a):
    """Futures local vol ``(K - F_0(T)(1 - exp(-a (T-t)))) eta(t, k_F)``."""
    F0, Ty = _maturity(curve, T)
    mult = np.asarray(K, dtype=float) - F0 * (1.0 - math.exp(-a * (Ty - t)))
    if np.any(mult < -1e-12 * F0):
        raise DomainError("strike below the futures floor F_0(T)(1 - exp(-a (T - t)))")
    k = effective_strike(t, Ty, K, curve, a)
    out = np.maximum(mult, 0.0) * eta(t, k)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# PDE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PDEGrid:
    """Uniform strike grid on [k_min, k_max] and time resolution.

    ``rannacher`` implicit half-steps replace the first Crank-Nicolson step(s)
    after the kinked payoff layer.
    """

    k_max: float = 5.0
    n_k: int = 200
    steps_per_year: int = 100
    k_min: float = 0.0
    rannacher: int = 2

    def __post_init__(self):
        if not (0 <= self.k_min < 1 < self.k_max):
            raise ConfigError("strike grid must satisfy 0 <= k_min < 1 < k_max")
        if self.n_k < 4 or self.steps_per_year < 1 or self.rannacher < 0:
            raise ConfigError("grid needs n_k >= 4, steps_per_year >= 1, rannacher >= 0")

    @property
    def nodes(self):
        return np.linspace(self.k_min, self.k_max, self.n_k + 1)


@dataclass(frozen=True)
class NormalizedCallGrid:
    """Layers of c(t, k) on the PDE nodes; ``values[j]`` is the layer at ``times[j]``."""

    k: np.ndarray
    times: np.ndarray
    values: np.ndarray
    a: float
    grid: PDEGrid
    s0: float = 1.0

    def layer(self, t):
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-10:
            raise RangeError(f"t={t} is not a PDE time node")
        return self.values[j]

    def mean(self, t):
        """E[s_t] = 1 - (1 - s_0) exp(-a t)."""
        return 1.0 - (1.0 - self.s0) * math.exp(-self.a * t)

    def __call__(self, t, k, extrapolate=True):
        return interpolate_layer(self.k, self.layer(t), np.asarray(k, dtype=float),
                                 self.mean(t), extrapolate)


def interpolate_layer(nodes, layer, k, mean=1.0, extrapolate=True):
    """Cubic interpolation of a call layer with exact wings.

    Below the grid the spot is positive so ``c = E[s] - k``; above ``k_max``
    the call is worthless.
    """
    k = np.asarray(k, dtype=float)
    lo, hi = nodes[0], nodes[-1]
    if not extrapolate and (np.any(k < lo) or np.any(k > hi)):
        raise RangeError(f"effective strike outside PDE grid [{lo}, {hi}]")
    inner = CubicSpline(nodes, layer)(np.clip(k, lo, hi))
    out = np.where(k < lo, mean - k if lo == 0 else layer[0] + (lo - k), np.where(k > hi, 0.0, inner))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def _operator(k, h, eta_k, a):
    """Tridiagonal coefficients (lower, diag, upper) of the spatial operator."""
    drift = -a * (1.0 - k)            # coefficient of dc/dk
    diff = 0.5 * (k * eta_k) ** 2      # coefficient of d2c/dk2
    with np.errstate(divide="ignore", invalid="ignore"):
        peclet = np.abs(drift) * h / np.where(diff > 0, diff, 0.0)
    upwind = peclet > 2.0
    lower = -drift / (2 * h) + diff / h**2
    diag = -a - 2 * diff / h**2
    upper = drift / (2 * h) + diff / h**2
    back = upwind & (drift < 0)        # transport to the right: backward difference
    fwd = upwind & (drift > 0)
    lower = np.where(back, -drift / h + diff / h**2, np.where(fwd, diff / h**2, lower))
    diag = np.where(back, -a + drift / h - 2 * diff / h**2,
                    np.where(fwd, -a - drift / h - 2 * diff / h**2, diag))
    upper = np.where(back, diff / h**2, np.where(fwd, drift / h + diff / h**2, upper))
    return lower, diag, upper


class _Marcher:
    """Theta-scheme time stepping for one constant-coefficient slice."""

    def __init__(self, nodes, eta_k, a, s0=1.0):
        self.k = nodes
        self.h = nodes[1] - nodes[0]
        self.a = a
        self.s0 = s0
        lower, diag, upper = _operator(nodes[1:-1], self.h, eta_k[1:-1], a)
        self.l, self.d, self.u = lower, diag, upper
        self._banded = {}

    def boundary(self, t):
        # c(t, k_min): E[(s - k_min)^+] = E[s] - k_min since s stays positive
        return 1.0 - (1.0 - self.s0) * math.exp(-self.a * t) - self.k[0]

    def _implicit(self, theta_dt):
        ab = self._banded.get(theta_dt)
        if ab is None:
            n = self.d.size
            ab = np.zeros((3, n))
            ab[0, 1:] = -theta_dt * self.u[:-1]
            ab[1] = 1.0 - theta_dt * self.d
            ab[2, :-1] = -theta_dt * self.l[1:]
            self._banded[theta_dt] = ab
        return ab

    def step(self, c, t, dt, theta):
        inner = c[1:-1]
        rhs = inner.copy()
        if theta < 1.0:
            Lc = self.d * inner
            Lc[1:] += self.l[1:] * inner[:-1]
            Lc[:-1] += self.u[:-1] * inner[1:]
            Lc[0] += self.l[0] * c[0]
            Lc[-1] += self.u[-1] * c[-1]
            rhs += (1.0 - theta) * dt * Lc
        g_new = self.boundary(t + dt)
        rhs[0] += theta * dt * self.l[0] * g_new
        out = np.empty_like(c)
        out[0] = g_new
        out[-1] = 0.0
        out[1:-1] = solve_banded((1, 1), self._implicit(theta * dt), rhs,
                                 overwrite_b=True, check_finite=False)
        return out

    def march(self, c, t0, t1, steps_per_year, rannacher=0, keep=False):
        n = max(1, int(math.ceil((t1 - t0) * steps_per_year - 1e-9)))
        dt = (t1 - t0) / n
        layers, times = [], []
        t = t0
        for j in range(n):
            if j < (rannacher + 1) // 2:
                c = self.step(c, t, 0.5 * dt, 1.0)
                c = self.step(c, t + 0.5 * dt, 0.5 * dt, 1.0)
            else:
                c = self.step(c, t, dt, 0.5)
            t = t0 + (j + 1) * dt
            if keep:
                layers.append(c)
                times.append(t)
        return c, times, layers


def initial_layer(nodes, s0=1.0):
    return np.maximum(s0 - nodes, 0.0)


def _check_layer(c, t, tol=1e-8):
    if not np.all(np.isfinite(c)):
        raise NumericsError(f"PDE produced non-finite values at t={t:.6g}")
    if c.min() < -tol:
        raise NumericsError(f"PDE produced negative call values ({c.min():.3g}) at t={t:.6g}")


def solve_normalized_calls(eta, a, grid=PDEGrid(), horizon=None, extra_times=(), s0=1.0):
    """Integrate the extended Dupire PDE from ``c(0, k) = (s0 - k)^+``.

    ``eta`` is a :class:`LocalVolSurface` or a callable ``eta(t, k)``. Time
    nodes are placed so that every time knot of the surface and every value
    in ``extra_times`` up to ``horizon`` falls on the grid. Within a step
    eta is frozen at the step midpoint.
    """
    if isinstance(grid, dict):
        grid = PDEGrid(**grid)
    if a < 0:
        raise ConfigError("mean reversion a must be non-negative")
    knots = np.asarray(getattr(eta, "time_knots", []), dtype=float)
    if horizon is None:
        horizon = max([*knots, *extra_times]) if (knots.size or extra_times) else 1.0
    if horizon <= 0:
        raise ConfigError("PDE horizon must be positive")
    breaks = sorted({float(x) for x in [*knots, *extra_times] if 0 < x < horizon} | {float(horizon)})
    nodes = grid.nodes
    c = initial_layer(nodes, s0)
    times, layers = [0.0], [c]
    t0 = 0.0
    for t1 in breaks:
        eta_k = np.asarray(eta(0.5 * (t0 + t1), nodes), dtype=float) * np.ones_like(nodes)
        if np.any(eta_k < 0) or not np.all(np.isfinite(eta_k)):
            raise ConfigError("local volatility must be finite and non-negative")
        marcher = _Marcher(nodes, eta_k, a, s0)
        c, ts, ls = marcher.march(c, t0, t1, grid.steps_per_year,
                                  grid.rannacher if t0 == 0.0 else 0, keep=True)
        for t, layer in zip(ts, ls):
            _check_layer(layer, t)
        times.extend(ts)
        layers.extend(ls)
        t0 = t1
    return NormalizedCallGrid(nodes, np.array(times), np.array(layers), float(a), grid, float(s0))


def vanilla_price_on_futures(gridsol, t, T, K, curve, discount, extrapolate=True):
    """Call on futures ``T`` expiring at ``t``: ``P_0(t) F_0(T) e^{-a(T-t)} c(t, k_F)``."""
    a = gridsol.a
    F0, Ty = _maturity(curve, T)
    k = effective_strike(t, Ty, K, curve, a)
    c = gridsol(t, k, extrapolate=extrapolate)
    out = discount_factor(discount, t) * F0 * math.exp(-a * (Ty - t)) * np.asarray(c)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LVConfig:
    """Settings for fitting eta to futures vanillas.

    ``tol`` bounds the largest absolute residual in normalised price units
    (price divided by ``P_0(t) F_0(T) e^{-a(T-t)}``). A slice fit stops early
    once its residuals are provably below ``target_fraction * tol``.
    """

    grid: PDEGrid = PDEGrid()
    n_strike_knots: int = None
    smoothing: float = 1e-5
    tol: float = 5e-4
    target_fraction: float = 0.1
    max_evals: int = 3000
    xtol: float = 1e-7
    eta_floor: float = 1e-3
    cap: float = ETA_CAP
    pad: float = 0.0


@dataclass
class _Quote:
    t: float
    k: float
    target: float
    weight: float
    scale: float
    index: int
    eta0: float = 0.3


def _prepare_quotes(quotes, curve, discount, a, cap):
    from .pricing import black_vega, implied_vol

    prepared, excluded = [], []
    for idx, q in enumerate(quotes):
        if q.kind != ON_FUTURES:
            continue
        F0, Ty = _maturity(curve, q.underlying)
        k = float(effective_strike(q.expiry, Ty, q.strike, curve, a))
        df = discount_factor(discount, q.expiry)
        scale = df * F0 * math.exp(-a * (Ty - q.expiry))
        if k <= 0.0:
            warnings.warn(f"quote {idx}: effective strike {k:.4g} below the model floor; excluded")
            excluded.append(idx)
            continue
        try:
            sigma = implied_vol(q.price, F0, q.strike, q.expiry, df)
        except DomainError:
            sigma = 0.3
        vega = black_vega(F0, q.strike, q.expiry, max(sigma, 1e-3), df) / scale
        # eta seen by this quote, from eta_F ~ sigma K
        eta0 = sigma * q.strike / max(q.strike - F0 * (1 - math.exp(-a * (Ty - q.expiry))), 1e-12)
        prepared.append(_Quote(q.expiry, k, q.price / scale, vega, scale, idx,
                               min(max(eta0, 1e-3), cap)))
    return prepared, excluded


def calibrate_local_vol(quotes, curve, discount, a, config=LVConfig(), initial=None):
    """Fit eta(t, k) to futures vanillas for a fixed mean reversion ``a``.

    One time knot per quoted expiry and 5-9 strike knots spanning the
    effective strikes. Slices are fitted in expiry order; each objective
    evaluation marches the PDE once across the slice being fitted. The
    objective is the squared vega-scaled price residual plus
    ``smoothing * ||second difference of eta||^2``. ``initial`` optionally
    warm-starts from another surface.
    """
    from .calibrator import subplex_minimize

    if quotes is None or len(quotes) == 0:
        raise CalibrationError("no futures quotes to calibrate to")
    prepared, excluded = _prepare_quotes(quotes, curve, discount, a, config.cap)
    if not prepared:
        raise CalibrationError("no usable futures quotes (all below the floor)")
    expiries = sorted({q.t for q in prepared})
    by_expiry = [[q for q in prepared if q.t == t] for t in expiries]
    ks = np.array([q.k for q in prepared])
    n_knots = config.n_strike_knots or int(np.clip(max(len(b) for b in by_expiry), 5, 9))
    lo, hi = ks.min() - config.pad, ks.max() + config.pad
    if hi - lo < 1e-6:
        lo, hi = lo - 0.1, hi + 0.1
    lo = max(lo, config.grid.k_min + 1e-6)
    strike_knots = np.linspace(lo, hi, n_knots)
    nodes = config.grid.nodes
    if hi >= nodes[-1]:
        raise CalibrationError("effective strikes exceed the PDE grid; raise k_max")

    values = np.empty((len(expiries), n_knots))
    c = initial_layer(nodes)
    t0 = 0.0
    solves = evals = 0
    residuals = np.full(len(quotes), np.nan)
    traces = []
    for m, (t1, bucket) in enumerate(zip(expiries, by_expiry)):
        qk = np.array([q.k for q in bucket])
        target = np.array([q.target for q in bucket])
        weight = np.maximum(np.array([q.weight for q in bucket]), 1e-2 * max(q.weight for q in bucket))
        if initial is not None:
            x0 = np.interp(strike_knots, initial.strike_knots, initial.slice(t1))
        elif m > 0:
            x0 = values[m - 1].copy()
        else:
            x0 = np.full(n_knots, np.mean([q.eta0 for q in bucket]))
        x0 = np.log(np.clip(x0, config.eta_floor, config.cap))
        rann = config.grid.rannacher if t0 == 0.0 else 0
        best = {"f": np.inf, "c": None, "res": None}

        def objective(x, c_start=c, t_start=t0, t_end=t1, rann=rann):
            nonlocal solves
            eta_knots = np.clip(np.exp(x), config.eta_floor, config.cap)
            eta_k = np.interp(nodes, strike_knots, eta_knots)
            marcher = _Marcher(nodes, eta_k, a)
            layer, _, _ = marcher.march(c_start, t_start, t_end, config.grid.steps_per_year, rann)
            solves += 1
            if not np.all(np.isfinite(layer)):
                return np.inf
            model = interpolate_layer(nodes, layer, qk)
            res = model - target
            f = float(np.sum((res / weight) ** 2)
                       + config.smoothing * np.sum(np.diff(eta_knots, 2) ** 2))
            if np.max(np.abs(res)) <= fit_target:
                # good enough: report 0 so the optimizer stops here (ftarget=0)
                f = 0.0
            if f < best["f"]:
                best.update(f=f, c=layer, res=res)
            return f

        fit_target = config.target_fraction * config.tol
        result = subplex_minimize(objective, x0, scale=np.full(n_knots, 0.1),
                                  tol=config.xtol, budget=config.max_evals, ftarget=0.0)
        evals += result.nfev
        traces.append(result.trace)
        values[m] = np.clip(np.exp(result.x), config.eta_floor, config.cap)
        c = best["c"]
        _check_layer(c, t1)
        for q, r in zip(bucket, best["res"]):
            residuals[q.index] = r
        t0 = t1

    diagnostics = {"pde_solves": solves, "evaluations": evals, "residuals": residuals,
                   "excluded": excluded, "traces": traces}
    surface = LocalVolSurface(np.array(expiries), strike_knots, values, float(a), config.cap,
                              diagnostics)
    worst = np.nanmax(np.abs(residuals))
    log.info("local vol calibration a=%.4f: %d PDE solves, max residual %.3g", a, solves, worst)
    if worst > config.tol:
        raise CalibrationError(f"local vol calibration residual {worst:.3g} exceeds tol {config.tol}",
                               best=surface, residuals=residuals)
    return surface


def reprice_quotes(surface, quotes, curve, discount, grid=PDEGrid()):
    """Model prices of futures quotes under ``surface``; NaN for excluded quotes."""
    a = surface.a or 0.0
    sol = solve_normalized_calls(surface, a, grid, horizon=max(q.expiry for q in quotes),
                                 extra_times=[q.expiry for q in quotes])
    out = np.full(len(quotes), np.nan)
    for i, q in enumerate(quotes):
        if q.kind != ON_FUTURES:
            continue
        if float(effective_strike(q.expiry, year_fraction(curve.valuation_date, q.underlying),
                                  q.strike, curve, a)) <= 0:
            continue
        out[i] = vanilla_price_on_futures(sol, q.expiry, q.underlying, q.strike, curve, discount)
    return out
