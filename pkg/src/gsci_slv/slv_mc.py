"""Two-factor stochastic local volatility particle Monte Carlo.

Two normalised spots ``s^c`` and ``s^f`` share the calibrated local vol
``eta`` and are driven by Brownian motions with correlation ``rho(t)``. The
leverage is applied in ratio form: each particle's diffusion is scaled by
``sqrt(v_i / E[v | s = s_i])`` with the conditional expectation estimated by
a Gaussian-kernel average over the particle cloud. Variance follows a
full-truncation Euler square-root scheme.

Futures are rebuilt from the factor driving them: contract ``j`` (0-based
curve position) uses ``s^c`` when ``j`` is odd and ``s^f`` when even, so any
two consecutive contracts sit on different factors.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, NumericsError, ParamError, RangeError
from .market_data import to_date, year_fraction
from .rng import step_normals

log = logging.getLogger(__name__)

SHARED, PER_FACTOR = "shared", "per_factor"
FACTOR_C, FACTOR_F = 0, 1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PiecewiseRho:
    """Right-continuous step function: ``values[i]`` on ``[breaks[i-1], breaks[i])``."""

    breaks: tuple
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.breaks) + 1:
            raise ParamError("piecewise rho needs one more value than breakpoints")
        if any(b2 <= b1 for b1, b2 in zip(self.breaks, self.breaks[1:])):
            raise ParamError("rho breakpoints must be ascending")

    def __call__(self, t):
        return self.values[int(np.searchsorted(self.breaks, t, side="right"))]


def semidefinite_cholesky(matrix, tol=1e-12):
    """Lower-triangular L with L L^T = matrix for a PSD matrix.

    Zero pivots (singular directions) yield zero columns instead of failing,
    so perfectly correlated channels reuse the same normal draw.
    """
    a = np.array(matrix, dtype=float)
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        if d < -tol:
            raise ParamError("correlation matrix is not positive semi-definite")
        if d <= tol:
            for i in range(j + 1, n):
                if abs(a[i, j] - low[i, :j] @ low[j, :j]) > 1e-9:
                    raise ParamError("correlation matrix is not positive semi-definite")
            continue
        low[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            low[i, j] = (a[i, j] - low[i, :j] @ low[j, :j]) / low[j, j]
    return low


def correlation_matrix(rho_t, rho_v, mode=PER_FACTOR):
    """Instantaneous correlation of the driving Brownian motions.

    ``shared``: (W^c, W^f, W^v) with one variance process.
    ``per_factor``: (W^c, W^f, W^{v,c}, W^{v,f}) where each variance noise is
    ``rho_v W^x + sqrt(1 - rho_v^2) Z^x`` with independent ``Z^x``.
    """
    if mode == SHARED:
        return np.array([[1.0, rho_t, rho_v], [rho_t, 1.0, rho_v], [rho_v, rho_v, 1.0]])
    if mode == PER_FACTOR:
        rr = rho_v * rho_t
        return np.array([[1.0, rho_t, rho_v, rr],
                         [rho_t, 1.0, rr, rho_v],
                         [rho_v, rr, 1.0, rho_v * rr],
                         [rr, rho_v, rho_v * rr, 1.0]])
    raise ParamError(f"unknown variance mode {mode!r}")


@dataclass(frozen=True)
class ModelParams:
    """SLV parameters {a, kappa, theta, chi, rho_v, v0, rho(t)}.

    ``rho`` is a constant or a :class:`PiecewiseRho`. ``rho_far`` holds
    correlations of contracts more than one slot apart; the two-factor engine
    does not use them. ``variance_mode`` selects one variance process shared
    by both factors or one per factor.
    """

    a: float = 0.3
    kappa: float = 1.0
    theta: float = 1.0
    chi: float = 0.1
    rho_v: float = 0.0
    v0: float = 1.0
    rho: object = 0.9
    variance_mode: str = PER_FACTOR
    rho_far: dict = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.kappa > 0 and self.theta > 0 and self.v0 > 0):
            raise ParamError("kappa, theta and v0 must be positive")
        if not (self.chi >= 0 and self.a >= 0):
            raise ParamError("chi and a must be non-negative")
        if not -1 <= self.rho_v <= 1:
            raise ParamError("rho_v must lie in [-1, 1]")
        if self.variance_mode not in (SHARED, PER_FACTOR):
            raise ParamError(f"unknown variance mode {self.variance_mode!r}")
        for r in self.rho_values:
            if not -1 <= r <= 1:
                raise ParamError("rho must lie in [-1, 1]")
            # PSD check once per distinct correlation level
            semidefinite_cholesky(correlation_matrix(r, self.rho_v, self.variance_mode))

    @property
    def rho_values(self):
        return self.rho.values if isinstance(self.rho, PiecewiseRho) else (float(self.rho),)

    def rho_at(self, t):
        return self.rho(t) if isinstance(self.rho, PiecewiseRho) else float(self.rho)

    @property
    def n_variance(self):
        return 1 if self.variance_mode == SHARED else 2

    def with_values(self, **kw):
        return replace(self, **kw)

    def as_dict(self):
        rho = ({"breaks": list(self.rho.breaks), "values": list(self.rho.values)}
               if isinstance(self.rho, PiecewiseRho) else float(self.rho))
        return {"a": self.a, "kappa": self.kappa, "theta": self.theta, "chi": self.chi,
                "rho_v": self.rho_v, "v0": self.v0, "rho": rho, "variance_mode": self.variance_mode}


# baseline parameter set used by the scans
BASELINE = ModelParams(a=0.3, rho=0.9, kappa=1.0, theta=1.0, chi=0.1, rho_v=0.0, v0=1.0)


@dataclass(frozen=True)
class SimConfig:
    """Particle count, time resolution, kernel bandwidth and seed.

    ``bandwidth="auto"`` uses ``1.5 * std(s) * N^(-1/5)`` recomputed each
    step. ``bins`` sets the equal-count bins of the kernel-sum accelerator;
    ``exact_kernel`` switches to the O(N^2) estimator.
    """

    n_particles: int = 10000
    steps_per_year: int = 250
    bandwidth: object = "auto"
    seed: int = 0
    bins: int = 200
    exact_kernel: bool = False
    antithetic: bool = False

    def __post_init__(self):
        if self.n_particles < 1000:
            raise ConfigError("at least 1000 particles are required")
        if self.steps_per_year < 12:
            raise ConfigError("at least 12 steps per year are required")
        if self.bandwidth != "auto" and not float(self.bandwidth) > 0:
            raise ConfigError("explicit bandwidth must be positive")
        if self.bins < 2:
            raise ConfigError("need at least two kernel bins")
        if self.antithetic and self.n_particles % 2:
            raise ConfigError("antithetic sampling needs an even particle count")


# ---------------------------------------------------------------------------
# Single-step building blocks
# ---------------------------------------------------------------------------

def correlated_increments(rho_t, rho_v, dt, z, mode=SHARED):
    """Brownian increments with the prescribed correlation times ``dt``.

    ``z`` is either a ``(channels, n)`` block of independent standard normals
    or a :class:`numpy.random.Generator` together with ``z=(rng, n)``.
    Returns ``(dW^c, dW^f, dW^v)`` in shared mode and
    ``(dW^c, dW^f, dW^{v,c}, dW^{v,f})`` in per-factor mode.
    """
    chol = semidefinite_cholesky(correlation_matrix(rho_t, rho_v, mode))
    if isinstance(z, tuple):
        rng, n = z
        z = rng.standard_normal((chol.shape[0], n))
    return tuple(math.sqrt(dt) * (chol @ z))


def step_variance(v, dt, params, dW):
    """Full-truncation Euler step ``v + kappa (theta - v+) dt + chi sqrt(v+) dW``."""
    vp = np.maximum(v, 0.0)
    return v + params.kappa * (params.theta - vp) * dt + params.chi * np.sqrt(vp) * dW


def auto_bandwidth(s):
    n = s.size
    return 1.5 * float(np.std(s)) * n ** -0.2


def _exact_ratio_terms(s, vp, eps, chunk=2048):
    num = np.empty_like(s)
    den = np.empty_like(s)
    for lo in range(0, s.size, chunk):
        w = np.exp(-0.5 * ((s[lo:lo + chunk, None] - s[None, :]) / eps) ** 2)
        num[lo:lo + chunk] = w.sum(axis=1)
        den[lo:lo + chunk] = w @ vp
    return num, den


def conditional_expectation(s, v, eps, bins=None):
    """Kernel estimate of E[v+ | s = s_i] at every particle.

    With ``bins`` the cloud is histogrammed on an equal-width grid (refined
    until the spacing is at most ``eps / 2``, up to ``4 * bins`` cells); each
    occupied cell acts as a point mass at its centre of mass, kernel sums
    are evaluated at the cell centres and linearly interpolated back to the
    particles. Cost is O(N + bins^2) with no sorting.
    """
    s = np.asarray(s, dtype=float)
    vp = np.maximum(np.asarray(v, dtype=float), 0.0)
    if bins is None or bins >= s.size:
        num, den = _exact_ratio_terms(s, vp, eps)
        with np.errstate(invalid="ignore", divide="ignore"):
            return den / num
    lo, hi = float(s.min()), float(s.max())
    nb = int(min(max(bins, math.ceil(2.0 * (hi - lo) / eps)), 4 * bins))
    width = (hi - lo) / nb
    u = (s - lo) * (1.0 / width)
    cell = np.minimum(u.astype(np.intp), nb - 1)
    counts = np.bincount(cell, minlength=nb).astype(float)
    occupied = counts > 0
    mass_s = np.bincount(cell, weights=s, minlength=nb)[occupied] / counts[occupied]
    mass_v = np.bincount(cell, weights=vp, minlength=nb)[occupied]
    grid = lo + (np.arange(nb) + 0.5) * width
    w = np.exp(-0.5 * ((grid[:, None] - mass_s[None, :]) / eps) ** 2)
    cond = (w @ mass_v) / (w @ counts[occupied])
    # linear interpolation between cell centres, flat beyond the outer ones
    x = u - 0.5
    np.clip(x, 0.0, nb - 1.0, out=x)
    left = np.minimum(x.astype(np.intp), nb - 2)
    x -= left
    x *= np.take(np.diff(cond), left)
    x += np.take(cond, left)
    return x


def conditional_variance_ratio(s, v, eps, bins=None, index=None):
    """Particle estimate of ``v_i+ / E[v+ | s = s_i]``.

    Returns 1 where every truncated variance in the kernel support is zero.
    ``eps=np.inf`` gives the flat-kernel limit ``v_i+ / mean(v+)``.
    """
    s = np.asarray(s, dtype=float)
    vp = np.maximum(np.asarray(v, dtype=float), 0.0)
    if math.isinf(eps) or np.ptp(s) == 0.0:
        m = vp.mean()
        r = vp / m if m > 0 else np.ones_like(vp)
    else:
        cond = conditional_expectation(s, vp, eps, bins)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(cond > 0, vp / cond, 1.0)
    return float(r[index]) if index is not None else r


@dataclass
class ParticleEnsemble:
    """Particle state: spots ``s[x]`` for factors c, f and variances ``v``.

    ``v`` has one row in shared mode and one row per factor otherwise; row
    ``variance_row(x)`` drives factor ``x``.
    """

    s: np.ndarray
    v: np.ndarray
    step: int = 0
    t: float = 0.0

    @classmethod
    def initial(cls, n, params):
        return cls(np.ones((2, n)), np.full((params.n_variance, n), float(params.v0)))

    @property
    def n(self):
        return self.s.shape[1]

    def variance_row(self, x):
        return self.v[0] if self.v.shape[0] == 1 else self.v[x]


def _eta_at(eta, t, s):
    out = eta(t, s)
    return np.broadcast_to(np.asarray(out, dtype=float), s.shape)


def step_spot(ensemble, eta, dt, increments, params, t=None, bandwidth="auto", bins=None):
    """Advance both spot factors by one Euler step.

    ``s' = s + a (1 - s) dt + s eta(t, s) sqrt(r) dW`` with ``r`` the
    conditional variance ratio of each factor. ``eta`` is evaluated at the
    step midpoint unless ``t`` is given. ``increments`` holds (dW^c, dW^f, ...).
    """
    t_eval = ensemble.t + 0.5 * dt if t is None else t
    new = np.empty_like(ensemble.s)
    for x in (FACTOR_C, FACTOR_F):
        s = ensemble.s[x]
        v = ensemble.variance_row(x)
        eps = auto_bandwidth(s) if bandwidth == "auto" else float(bandwidth)
        r = conditional_variance_ratio(s, v, eps if eps > 0 else np.inf, bins)
        vol = s * _eta_at(eta, t_eval, s) * np.sqrt(r)
        new[x] = s + params.a * (1.0 - s) * dt + vol * increments[x]
    if not np.all(np.isfinite(new)):
        raise NumericsError(f"non-finite spot at step {ensemble.step}")
    return new


def advance(ensemble, eta, dt, z, params, config):
    """One full step of spots and variances from normals ``z``; returns a new ensemble."""
    rho_t = params.rho_at(ensemble.t)
    dW = correlated_increments(rho_t, params.rho_v, dt, z, params.variance_mode)
    bins = None if config.exact_kernel else config.bins
    s_new = step_spot(ensemble, eta, dt, dW, params, bandwidth=config.bandwidth, bins=bins)
    v_new = np.empty_like(ensemble.v)
    for row in range(ensemble.v.shape[0]):
        v_new[row] = step_variance(ensemble.v[row], dt, params, dW[2 + row])
    if not np.all(np.isfinite(v_new)):
        raise NumericsError(f"non-finite variance at step {ensemble.step}")
    return ParticleEnsemble(s_new, v_new, ensemble.step + 1, ensemble.t + dt)


def channels(params):
    return 3 if params.variance_mode == SHARED else 4


# ---------------------------------------------------------------------------
# Path engine
# ---------------------------------------------------------------------------

def factor_of(contract):
    """Factor driving curve position ``contract`` (0-based)."""
    return FACTOR_C if contract % 2 == 1 else FACTOR_F


def reconstruct_futures(s_x, t, T, F0, a):
    """``F_0(T) (1 - (1 - s) exp(-a (T - t)))``."""
    return F0 * (1.0 - (1.0 - s_x) * math.exp(-a * (T - t)))


def _grid(curve, schedule, horizon):
    start = np.datetime64(curve.valuation_date)
    if len(schedule) == 0 or schedule.dates[0] != start:
        raise DataError("roll schedule must start on the curve valuation date")
    end = np.datetime64(to_date(horizon))
    if end > np.datetime64(curve.maturities[-1]):
        raise RangeError(f"horizon {to_date(horizon)} beyond the last futures maturity")
    if end > schedule.dates[-1]:
        raise RangeError("roll schedule does not cover the horizon")
    stop = int(np.searchsorted(schedule.dates, end, side="right"))
    dates = schedule.dates[:stop]
    times = (dates - start).astype(float) / 365.0
    return dates, times


def run_particles(params, eta, curve, schedule, config, horizon, on_day):
    """Simulate on the business-day grid and call ``on_day(d, t, ensemble)``.

    Each business-day interval is split into ``max(1, round(M * dt))``
    sub-steps, so weekdays take one step and weekends two at M = 250.
    Draws for global step ``k`` come from the ``(seed, k)`` stream.
    """
    dates, times = _grid(curve, schedule, horizon)
    ens = ParticleEnsemble.initial(config.n_particles, params)
    on_day(0, 0.0, ens)
    nch = channels(params)
    for d in range(1, len(dates)):
        t0, t1 = times[d - 1], times[d]
        nsub = max(1, int(round((t1 - t0) * config.steps_per_year)))
        h = (t1 - t0) / nsub
        for j in range(nsub):
            z = step_normals(config.seed, ens.step, nch, config.n_particles, config.antithetic)
            ens = advance(ens, eta, h, z, params, config)
            ens.t = t0 + (j + 1) * h
        on_day(d, float(t1), ens)
    return dates, times


@dataclass
class PathSet:
    """Reconstructed futures prices ``prices[date, contract, particle]``.

    ``contracts`` are curve positions; entries after a contract's maturity
    are NaN.
    """

    dates: np.ndarray
    times: np.ndarray
    contracts: tuple
    prices: np.ndarray
    seed: int
    steps_per_year: int
    spots: np.ndarray = None

    MAGIC = b"GSCIPATH"
    VERSION = 1

    @property
    def n_particles(self):
        return self.prices.shape[2]

    def price(self, date_index, contract):
        return self.prices[date_index, self.contracts.index(contract)]

    def date_index(self, date):
        d = np.datetime64(to_date(date))
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self.dates) or self.dates[i] != d:
            raise RangeError(f"{to_date(date)} not stored in the path set")
        return i

    def save(self, path):
        """Binary layout: magic, uint16 version, uint32 header length, JSON
        header, then float64 little-endian prices in C order."""
        header = json.dumps({
            "seed": int(self.seed), "N": int(self.n_particles), "M": int(self.steps_per_year),
            "contracts": list(map(int, self.contracts)),
            "dates": [str(d) for d in self.dates], "times": self.times.tolist(),
            "shape": list(self.prices.shape),
        }).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC + struct.pack("<HI", self.VERSION, len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.prices, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(cls.MAGIC))
            if magic != cls.MAGIC:
                raise DataError(f"{path}: not a path-set file")
            version, hlen = struct.unpack("<HI", fh.read(6))
            if version != cls.VERSION:
                raise DataError(f"{path}: unsupported path-set version {version}")
            h = json.loads(fh.read(hlen))
            body = np.frombuffer(fh.read(), dtype="<f8").reshape(h["shape"])
        return cls(np.array(h["dates"], dtype="datetime64[D]"), np.array(h["times"]),
                   tuple(h["contracts"]), body.astype(float), h["seed"], h["M"])


def needed_contracts(schedule, stop=None):
    return schedule.contracts(stop)


def simulate_paths(params, eta, curve, schedule, config, horizon, store_dates=None,
                   contracts=None, keep_spots=False):
    """Simulate and store futures prices on the business-day grid.

    ``store_dates`` restricts storage (default: every business day up to
    ``horizon``); ``contracts`` defaults to every front/second contract the
    schedule references up to the horizon.
    """
    dates, _ = _grid(curve, schedule, horizon)
    if contracts is None:
        contracts = needed_contracts(schedule, len(dates))
    contracts = tuple(int(c) for c in contracts)
    if store_dates is None:
        keep = np.arange(len(dates))
    else:
        want = np.array([np.datetime64(to_date(d)) for d in store_dates], dtype="datetime64[D]")
        keep = np.searchsorted(dates, want)
        if np.any(keep >= len(dates)) or np.any(dates[np.minimum(keep, len(dates) - 1)] != want):
            raise RangeError("store dates must be business days within the horizon")
        keep = np.unique(keep)
    slot = {int(d): i for i, d in enumerate(keep)}
    mats = curve.times
    out = np.full((len(keep), len(contracts), config.n_particles), np.nan)
    spots = np.empty((len(keep), 2, config.n_particles)) if keep_spots else None

    def on_day(d, t, ens):
        i = slot.get(d)
        if i is None:
            return
        for j, c in enumerate(contracts):
            if mats[c] >= t - 1e-12:
                out[i, j] = reconstruct_futures(ens.s[factor_of(c)], t, mats[c], curve.prices[c], params.a)
        if spots is not None:
            spots[i] = ens.s

    all_dates, all_times = run_particles(params, eta, curve, schedule, config, horizon, on_day)
    return PathSet(all_dates[keep], all_times[keep], contracts, out, config.seed,
                   config.steps_per_year, spots)


def simulate_index(params, eta, curve, schedule, config, horizon, i0=100.0, record_dates=None):
    """Stream the ER index along the simulation without storing futures paths.

    Returns :class:`~gsci_slv.index_engine.IndexPaths` at ``record_dates``
    (default: every business day).
    """
    from .index_engine import IndexAccumulator, IndexPaths

    dates, times = _grid(curve, schedule, horizon)
    if record_dates is None:
        keep = np.arange(len(dates))
    else:
        want = np.array([np.datetime64(to_date(d)) for d in record_dates], dtype="datetime64[D]")
        keep = np.searchsorted(dates, want)
        if np.any(keep >= len(dates)) or np.any(dates[np.minimum(keep, len(dates) - 1)] != want):
            raise RangeError("index record dates must be business days within the horizon")
        keep = np.unique(keep)
    slot = {int(d): i for i, d in enumerate(keep)}
    mats = curve.times
    acc = IndexAccumulator(schedule, i0, config.n_particles)
    values = np.empty((len(keep), config.n_particles))

    def price_fn(ens, t):
        return lambda c: reconstruct_futures(ens.s[factor_of(c)], t, mats[c], curve.prices[c], params.a)

    def on_day(d, t, ens):
        acc.update(d, price_fn(ens, t))
        i = slot.get(d)
        if i is not None:
            values[i] = acc.value

    run_particles(params, eta, curve, schedule, config, horizon, on_day)
    return IndexPaths(dates[keep], times[keep], values, float(i0))


# ---------------------------------------------------------------------------
# Leverage diagnostic
# ---------------------------------------------------------------------------

def compute_leverage_diagnostic(eta_f, strikes, futures, variance, eps, support=6.0):
    """Leverage ``L = eta_F / sqrt(E[v | F = K])`` on a strike grid.

    Returns ``(L, missing)``; strikes farther than ``support * eps`` from
    every particle are flagged missing and set to NaN.
    """
    strikes = np.atleast_1d(np.asarray(strikes, dtype=float))
    eta_f = np.broadcast_to(np.asarray(eta_f, dtype=float), strikes.shape)
    futures = np.asarray(futures, dtype=float)
    if futures.size == 0:
        raise DataError("empty particle snapshot")
    vp = np.maximum(np.asarray(variance, dtype=float), 0.0)
    sorted_f = np.sort(futures)
    pos = np.clip(np.searchsorted(sorted_f, strikes), 1, sorted_f.size - 1) if sorted_f.size > 1 else np.zeros(strikes.size, int)
    gap = np.minimum(np.abs(strikes - sorted_f[pos - 1 if sorted_f.size > 1 else pos]), np.abs(strikes - sorted_f[pos]))
    missing = gap > support * eps
    w = np.exp(-0.5 * ((strikes[:, None] - futures[None, :]) / eps) ** 2)
    den = w.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = (w @ vp) / den
        lev = eta_f / np.sqrt(cond)
    missing |= ~(den > 0) | ~np.isfinite(lev)
    return np.where(missing, np.nan, lev), missing
