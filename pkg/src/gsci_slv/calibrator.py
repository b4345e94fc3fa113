"""Index-option losses and the hybrid ESCH (global) + Subplex (local) optimizer."""

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import OptimizeResult

from .errors import CalibrationError, ConfigError, DataError, NumericsError, ParamError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
REDUCED_NAMES = ("a", "chi", "rho_v", "rho")
# held fixed during index calibration: they barely move index option prices
FIXED_PARAMS = {"kappa": 1.0, "theta": 1.0, "v0": 1.0}
DEFAULT_BOUNDS = {"a": (0.0, 1.0), "chi": (0.0, 1.0), "rho_v": (-1.0, 1.0), "rho": (-1.0, 1.0)}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _vectors(*arrays):
    arrays = [np.atleast_1d(np.asarray(a, dtype=float)) for a in arrays]
    if any(a.shape != arrays[0].shape for a in arrays) or arrays[0].ndim != 1:
        raise DataError("price vectors must be one-dimensional and of equal length")
    if arrays[0].size == 0:
        raise DataError("at least one quote is required")
    return arrays


def _pnorm(x, p):
    if p < 1:
        raise ConfigError("p-norm exponent must be >= 1")
    if math.isinf(p):
        return float(np.max(np.abs(x)))
    return float(np.sum(np.abs(x) ** p) ** (1.0 / p))


def loss_p(market, model, p=2):
    """p-norm of the market-minus-model price vector."""
    market, model = _vectors(market, model)
    return _pnorm(market - model, p)


def loss_normalized(nov, dec, model, p=2, floor=1e-4):
    """p-norm of model distances to the snapshot mean, in units of snapshot spread.

    Each term is ``|mean_j - model_j| / max(|dec_j - nov_j|, floor * |mean_j|)``.
    """
    nov, dec, model = _vectors(nov, dec, model)
    mean = 0.5 * (nov + dec)
    denom = np.maximum(np.abs(dec - nov), floor * np.abs(mean))
    bad = np.nonzero(~(denom > 0) | ~np.isfinite(denom))[0]
    if bad.size:
        raise DataError(f"degenerate snapshot spread for quotes {bad.tolist()}")
    return _pnorm((mean - model) / denom, p)


@dataclass(frozen=True)
class LossSpec:
    p: float = 2.0
    mode: str = "normalized"
    floor: float = 1e-4

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError("p-norm exponent must be >= 1")
        if self.mode not in ("plain", "normalized"):
            raise ConfigError("loss mode must be 'plain' or 'normalized'")

    def __call__(self, model, market=None, nov=None, dec=None):
        if self.mode == "plain":
            return loss_p(market, model, self.p)
        if nov is None or dec is None:
            raise DataError("normalized loss needs both quote snapshots")
        return loss_normalized(nov, dec, model, self.p, self.floor)


# ---------------------------------------------------------------------------
# Evaluation bookkeeping
# ---------------------------------------------------------------------------

class _BudgetExhausted(Exception):
    pass


class _TargetReached(_BudgetExhausted):
    pass


class _Counted:
    """Wraps an objective with a budget, a best-so-far record and a trace."""

    def __init__(self, f, budget, lower=None, upper=None, ftarget=None):
        self.f = f
        self.budget = budget
        self.ftarget = -math.inf if ftarget is None else ftarget
        self.lower, self.upper = lower, upper
        self.nfev = 0
        self.best_x, self.best_f = None, np.inf
        self.trace = []

    def project(self, x):
        if self.lower is None:
            return x
        return np.clip(x, self.lower, self.upper)

    def record(self, x, fx):
        self.nfev += 1
        if fx < self.best_f or self.best_x is None:
            self.best_x, self.best_f = np.array(x, dtype=float), fx
        self.trace.append(self.best_f)

    def __call__(self, x):
        if self.nfev >= self.budget:
            raise _BudgetExhausted
        x = self.project(np.asarray(x, dtype=float))
        fx = float(self.f(x))
        if math.isnan(fx):
            fx = math.inf
        self.record(x, fx)
        if fx <= self.ftarget:
            raise _TargetReached
        return fx


# ---------------------------------------------------------------------------
# ESCH
# ---------------------------------------------------------------------------

def _as_bounds(bounds):
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2:
        raise ConfigError("bounds must be a sequence of (lower, upper) pairs")
    if not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
        raise ConfigError("bounds must be finite with lower < upper")
    return b[:, 0].copy(), b[:, 1].copy()


def _cauchy_mutate(value, lo, hi, scale, rng, tries=64):
    for _ in range(tries):
        cand = value + scale * math.tan(math.pi * (rng.random() - 0.5))
        if lo <= cand <= hi:
            return cand
    return rng.uniform(lo, hi)


def esch_minimize(f, bounds, np_parents=20, no_offspring=40, budget=1000, seed=0,
                  x0=None, f0=None, mutation_scale=0.1, threads=1):
    """Evolutionary global search with single-point crossover and Cauchy mutation.

    Parents start uniform in the box (``x0`` replaces the first one when
    given). Each generation pairs random parents, crosses them at one cut
    point, mutates one random coordinate of every child by a truncated Cauchy
    step of width ``mutation_scale * (upper - lower)``, and keeps the
    ``np_parents`` fittest of parents plus offspring. Offspring fitness is
    evaluated on ``threads`` workers; results do not depend on that number.
    """
    lower, upper = _as_bounds(bounds)
    n = lower.size
    if np_parents < 2 or no_offspring < 1:
        raise ConfigError("ESCH needs at least two parents and one offspring")
    if budget < np_parents + no_offspring:
        raise ConfigError(f"budget {budget} below one generation ({np_parents} + {no_offspring})")
    rng = np.random.Generator(np.random.PCG64(seed))
    counted = _Counted(f, budget)
    width = upper - lower

    parents = lower + width * rng.random((np_parents, n))
    fitness = np.empty(np_parents)
    start = 0
    if x0 is not None:
        parents[0] = np.clip(np.asarray(x0, dtype=float), lower, upper)
        if f0 is not None:
            fitness[0] = f0
            counted.record(parents[0], float(f0))
            counted.nfev -= 1      # supplied value, not an evaluation
            start = 1
    for i in range(start, np_parents):
        fitness[i] = counted(parents[i])

    generations = 0
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while counted.nfev < budget:
            children = []
            while len(children) < no_offspring:
                i, j = rng.choice(np_parents, size=2, replace=False)
                cut = int(rng.integers(1, n)) if n > 1 else 0
                a = np.concatenate([parents[i][:cut], parents[j][cut:]])
                b = np.concatenate([parents[j][:cut], parents[i][cut:]])
                for child in (a, b):
                    pos = int(rng.integers(n))
                    child[pos] = _cauchy_mutate(child[pos], lower[pos], upper[pos],
                                                mutation_scale * width[pos], rng)
                    children.append(child)
            children = np.array(children[:no_offspring][:budget - counted.nfev])
            if pool is None:
                scores = [float(f(c)) for c in children]
            else:
                scores = list(pool.map(lambda c: float(f(c)), children))
            for c, s in zip(children, scores):
                counted.record(c, math.inf if math.isnan(s) else s)
            allx = np.vstack([parents, children])
            allf = np.concatenate([fitness, [math.inf if math.isnan(s) else s for s in scores]])
            keep = np.argsort(allf, kind="stable")[:np_parents]
            parents, fitness = allx[keep], allf[keep]
            generations += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return OptimizeResult(x=parents[0].copy(), fun=float(fitness[0]), nfev=counted.nfev,
                          nit=generations, trace=counted.trace, success=True,
                          message="budget exhausted", population=parents, fitness=fitness)


# ---------------------------------------------------------------------------
# Subplex
# ---------------------------------------------------------------------------

def partition_subspaces(weights, nsmin, nsmax):
    """Rowan's greedy split of coordinates (ordered by decreasing weight).

    Returns index lists whose sizes lie in [nsmin, nsmax] and cover every
    coordinate once.
    """
    order = np.argsort(-np.abs(np.asarray(weights, dtype=float)), kind="stable")
    w = np.abs(np.asarray(weights, dtype=float))[order]
    n = w.size
    parts, pos = [], 0
    while pos < n:
        left = n - pos
        best_k, best_g = None, -np.inf
        for k in range(nsmin, min(nsmax, left) + 1):
            rest = left - k
            if rest and rest < nsmin:
                continue
            g = w[pos:pos + k].sum() / k - (w[pos + k:].sum() / rest if rest else 0.0)
            if g > best_g:
                best_k, best_g = k, g
        if best_k is None:
            best_k = left
        parts.append(order[pos:pos + best_k].tolist())
        pos += best_k
    return parts


def _simplex_volume(vertices):
    edges = vertices[1:] - vertices[0]
    return abs(np.linalg.det(edges)) / math.factorial(edges.shape[0])


def _simplex_size(vertices, best):
    return float(np.sum(np.abs(vertices - vertices[best])))


def _nelder_mead(fun, x, fx, idx, steps, coef, psi, events=None):
    """Nelder-Mead on coordinates ``idx`` of ``x``; stops when the simplex
    has shrunk by ``psi`` relative to its initial size."""
    alpha, beta, gamma, delta = coef
    k = len(idx)

    def full(y):
        z = x.copy()
        z[idx] = y
        return z

    base = x[idx].copy()
    verts = np.vstack([base, base + np.diag(steps)])
    fv = np.empty(k + 1)
    fv[0] = fx
    for j in range(1, k + 1):
        fv[j] = fun(full(verts[j]))
    size0 = _simplex_size(verts, int(np.argmin(fv)))
    while True:
        order = np.argsort(fv, kind="stable")
        verts, fv = verts[order], fv[order]
        if _simplex_size(verts, 0) <= psi * size0:
            break
        centroid = verts[:-1].mean(axis=0)
        worst = verts[-1]
        xr = centroid + alpha * (centroid - worst)
        fr = fun(full(xr))
        if fr < fv[0]:
            xe = centroid + gamma * (xr - centroid)
            fe = fun(full(xe))
            verts[-1], fv[-1] = (xe, fe) if fe < fr else (xr, fr)
        elif fr < fv[-2]:
            verts[-1], fv[-1] = xr, fr
        else:
            if fr < fv[-1]:
                xc = centroid + beta * (xr - centroid)
                fc = fun(full(xc))
                ok = fc <= fr
            else:
                xc = centroid + beta * (worst - centroid)
                fc = fun(full(xc))
                ok = fc < fv[-1]
            if ok:
                verts[-1], fv[-1] = xc, fc
            else:
                before = _simplex_volume(verts) if events is not None else None
                best_before = fv[0]
                for j in range(1, k + 1):
                    verts[j] = verts[0] + delta * (verts[j] - verts[0])
                    fv[j] = fun(full(verts[j]))
                if events is not None:
                    events.append({"kind": "shrink", "volume_before": before,
                                   "volume_after": _simplex_volume(verts),
                                   "best_before": best_before, "best_after": float(fv.min())})
        if _simplex_size(verts, int(np.argmin(fv))) == 0.0:
            break
    j = int(np.argmin(fv))
    return full(verts[j]), float(fv[j])


def subplex_minimize(f, x0, scale=None, tol=1e-8, alpha=1.0, beta=0.5, gamma=2.0, delta=0.5,
                     psi=0.25, omega=0.1, nsmin=None, nsmax=None, budget=10000, bounds=None,
                     f0=None, record_events=False, ftarget=None):
    """Rowan's Subplex: Nelder-Mead on adaptively chosen coordinate subspaces.

    ``scale`` sets the initial step per coordinate. The run stops once every
    coordinate's last move and next step are below ``tol`` relative to
    ``max(|x_i|, 1)``, or when ``budget`` evaluations are spent. Points are
    projected onto ``bounds`` when given; the run also ends as soon as an
    evaluation reaches ``ftarget``. ``result.improved`` is False when
    nothing better than ``x0`` was found.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    nsmin = min(2, n) if nsmin is None else nsmin
    nsmax = min(5, n) if nsmax is None else nsmax
    if not 1 <= nsmin <= nsmax <= n:
        raise ConfigError("need 1 <= nsmin <= nsmax <= dimension")
    step = np.full(n, 0.1) if scale is None else np.broadcast_to(np.asarray(scale, dtype=float), (n,)).copy()
    if np.any(step <= 0):
        raise ConfigError("subplex scale must be positive")
    lower = upper = None
    if bounds is not None:
        lower, upper = _as_bounds(bounds)
        x = np.clip(x, lower, upper)
    counted = _Counted(f, budget, lower, upper, ftarget)
    events = [] if record_events else None
    if budget <= 0:
        return OptimizeResult(x=x, fun=f0, nfev=0, nit=0, trace=[], success=False, improved=False,
                              message="zero budget", events=events, partitions=[])
    partitions = []
    status, nit = "budget exhausted", 0
    try:
        if f0 is None:
            fx = counted(x)
        else:
            fx = float(f0)
            counted.best_x, counted.best_f = x.copy(), fx
        dx = step.copy()
        while True:
            parts = partition_subspaces(dx, nsmin, nsmax)
            partitions.append(parts)
            x_old = x.copy()
            for part in parts:
                x, fx = _nelder_mead(counted, x, fx, part, step[part],
                                     (alpha, beta, gamma, delta), psi, events)
            nit += 1
            dx = x - x_old
            if len(parts) > 1:
                ratio = np.sum(np.abs(dx)) / np.sum(np.abs(step))
                factor = min(max(ratio, omega), 1.0 / omega)
            else:
                factor = psi
            step = np.where(dx == 0, -step * factor, np.copysign(np.abs(step) * factor, dx))
            crit = np.maximum(np.abs(dx), np.abs(step)) / np.maximum(np.abs(x), 1.0)
            if np.max(crit) <= tol:
                status = "converged"
                break
    except _TargetReached:
        status = "target reached"
    except _BudgetExhausted:
        pass
    best_x = counted.best_x if counted.best_x is not None else x
    improved = counted.best_f < (f0 if f0 is not None else (counted.trace[0] if counted.trace else np.inf))
    return OptimizeResult(x=best_x, fun=float(counted.best_f), nfev=counted.nfev, nit=nit,
                          trace=counted.trace, success=status != "budget exhausted", message=status,
                          improved=bool(improved), events=events, partitions=partitions)


# ---------------------------------------------------------------------------
# Hybrid calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationReport:
    """Outcome of :func:`hybrid_calibrate`; serialises to JSON."""

    params: dict
    fixed: dict
    loss_trace: list
    n_evals: int
    seconds: float
    seed: int
    stages: dict = field(default_factory=dict)
    quote_files: list = field(default_factory=list)
    eta_file: str = None
    format_version: int = FORMAT_VERSION

    def to_json(self):
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def hybrid_calibrate(objective, bounds, seed=0, p0=None, names=None, global_budget=300,
                     local_budget=200, np_parents=20, no_offspring=40, local_scale=0.1,
                     local_tol=1e-6, fixed=None, threads=1):
    """Random p0 -> ESCH -> p1 -> Subplex -> p2.

    ``p0`` defaults to a uniform draw in ``bounds``. A zero ``global_budget``
    skips ESCH (warm start from ``p0``); a zero ``local_budget`` skips
    Subplex. Each stage returns its own best point, so
    ``f(p2) <= f(p1) <= f(p0)``.
    """
    lower, upper = _as_bounds(bounds)
    names = list(names or REDUCED_NAMES[:lower.size])
    rng = np.random.Generator(np.random.PCG64(seed))
    t_start = time.perf_counter()
    if p0 is None:
        p0 = lower + (upper - lower) * rng.random(lower.size)
    p0 = np.clip(np.asarray(p0, dtype=float), lower, upper)
    trace = []

    f0 = float(objective(p0))
    trace.append(f0)
    n_evals = 1
    p1, f1 = p0, f0
    if global_budget > 0:
        res = esch_minimize(objective, np.column_stack([lower, upper]), np_parents, no_offspring,
                            global_budget, seed=int(rng.integers(2**63)), x0=p0, f0=f0,
                            threads=threads)
        n_evals += res.nfev
        trace.extend(res.trace[1:] if res.trace and res.trace[0] == f0 else res.trace)
        if res.fun <= f0:
            p1, f1 = res.x, res.fun
    log.info("hybrid: ESCH stage f0=%.6g -> f1=%.6g", f0, f1)
    p2, f2 = p1, f1
    if local_budget > 0:
        res = subplex_minimize(objective, p1, scale=local_scale * (upper - lower), tol=local_tol,
                               budget=local_budget, bounds=np.column_stack([lower, upper]), f0=f1)
        n_evals += res.nfev
        trace.extend(min(v, trace[-1]) for v in res.trace)
        if res.fun <= f1:
            p2, f2 = res.x, res.fun
    log.info("hybrid: Subplex stage f1=%.6g -> f2=%.6g", f1, f2)
    stages = {
        "p0": dict(zip(names, map(float, p0))), "f0": f0,
        "p1": dict(zip(names, map(float, p1))), "f1": float(f1),
        "p2": dict(zip(names, map(float, p2))), "f2": float(f2),
    }
    return CalibrationReport(params=dict(zip(names, map(float, p2))), fixed=dict(fixed or {}),
                             loss_trace=[float(v) for v in trace], n_evals=n_evals,
                             seconds=time.perf_counter() - t_start, seed=int(seed), stages=stages)


# ---------------------------------------------------------------------------
# Index objective
# ---------------------------------------------------------------------------

def _is_factory(eta):
    from .pricing import _takes_one

    return _takes_one(eta)


class IndexObjective:
    """Loss of index option quotes as a function of the reduced parameters.

    Each call rebuilds the model: eta is refitted to the futures quotes for
    the candidate ``a`` (cached on ``a`` rounded to 1e-4, warm-started from
    the surface at ``a`` rounded to 0.1), the particle system is simulated with the
    fixed ``config.seed`` and the index options are repriced. Infeasible
    parameters (non-PSD correlations, numerical blow-up) score ``inf``.
    """

    def __init__(self, index_quotes, futures_quotes, curve, discount, schedule, config,
                 loss=LossSpec(), names=REDUCED_NAMES, fixed=None, lv_config=None, i0=100.0,
                 variance_mode="per_factor", eta=None):
        from .dupire_lv import LVConfig
        from .pricing import OptionSpec

        self.quotes = index_quotes
        self.futures_quotes = futures_quotes
        self.curve, self.discount, self.schedule = curve, discount, schedule
        self.config, self.loss, self.i0 = config, loss, float(i0)
        self.names = tuple(names)
        self.fixed = dict(FIXED_PARAMS if fixed is None else fixed)
        self.lv_config = lv_config or LVConfig()
        self.variance_mode = variance_mode
        self._eta = eta
        first = index_quotes.snapshots[0] if index_quotes.snapshots else index_quotes.quotes
        self.specs = [OptionSpec(q.expiry, q.expiry_date, moneyness=q.moneyness) for q in first]
        if any(q.expiry_date is None for q in first):
            raise DataError("index quotes need expiry dates on the business-day grid")
        self.dates = sorted({q.expiry_date for q in first})
        if index_quotes.snapshots:
            self.nov = np.array([q.price for q in index_quotes.snapshots[0]])
            self.dec = np.array([q.price for q in index_quotes.snapshots[1]])
            self.market = 0.5 * (self.nov + self.dec)
        else:
            self.nov = self.dec = None
            self.market = np.array([q.price for q in first])
            if loss.mode == "normalized":
                raise DataError("normalized loss needs two quote snapshots")
        self._cache = {}
        self._lock = threading.Lock()
        self.n_calls = 0
        self.seconds = 0.0

    def eta_for(self, a):
        """Local vol surface for mean reversion ``a`` (cached)."""
        from .dupire_lv import calibrate_local_vol

        if self._eta is not None:
            return self._eta(a) if _is_factory(self._eta) else self._eta
        key = round(float(a), 4)
        anchor = round(key, 1)
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        # warm start only from a cold-fitted anchor so the surface never
        # depends on the order in which candidates were evaluated
        initial = None if key == anchor else self.eta_for(anchor)
        try:
            surface = calibrate_local_vol(self.futures_quotes, self.curve, self.discount, key,
                                          self.lv_config, initial=initial)
        except CalibrationError as exc:
            if exc.best is None:
                raise
            log.warning("eta fit at a=%.4f missed tolerance (%s); using best surface", key, exc)
            surface = exc.best
        with self._lock:
            return self._cache.setdefault(key, surface)

    def params(self, x):
        from .slv_mc import ModelParams

        kw = dict(self.fixed)
        kw.update(zip(self.names, map(float, x)))
        if "a" in kw:
            kw["a"] = round(kw["a"], 4)
        return ModelParams(variance_mode=self.variance_mode, **kw)

    def model_prices(self, x):
        from .pricing import price_index_vanillas
        from .slv_mc import simulate_index

        params = self.params(x)
        eta = self.eta_for(params.a)
        paths = simulate_index(params, eta, self.curve, self.schedule, self.config, self.dates[-1],
                               self.i0, self.dates)
        return price_index_vanillas(paths, self.specs, self.discount)

    def __call__(self, x):
        t0 = time.perf_counter()
        try:
            prices, _ = self.model_prices(x)
        except (ParamError, NumericsError) as exc:
            log.debug("infeasible point %s: %s", np.round(x, 6), exc)
            return math.inf
        finally:
            self.n_calls += 1
            self.seconds += time.perf_counter() - t0
        if self.loss.mode == "plain":
            return float(self.loss(prices, market=self.market))
        return float(self.loss(prices, nov=self.nov, dec=self.dec))
