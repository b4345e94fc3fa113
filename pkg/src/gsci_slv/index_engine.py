"""Excess-return commodity index replication along futures paths.

The index holds a portfolio of at most two contracts, in proportions
``alpha`` (front) and ``1 - alpha`` (second) fixed at the end of each
business day, and is marked to the next day's futures prices.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, RangeError
from .market_data import to_date


def _positive(*arrays):
    for x in arrays:
        if np.any(~(np.asarray(x) > 0)):
            raise DataError("futures prices must be positive and finite")


def index_step_nonroll(I, F_t, F_t1):
    """``I * F_{t+1} / F_t`` for a single held contract."""
    _positive(F_t, F_t1)
    return I * (np.asarray(F_t1, dtype=float) / F_t)


def index_step_roll(I, alpha, Fc_t, Ff_t, Fc_t1, Ff_t1):
    """Index update across a roll day with front weight ``alpha``.

    ``I * (alpha Fc' + (1 - alpha) Ff') / (alpha Fc + (1 - alpha) Ff)``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise DataError(f"roll weight {alpha} outside [0, 1]")
    if alpha < 1.0:
        _positive(Ff_t, Ff_t1)
    if alpha > 0.0:
        _positive(Fc_t, Fc_t1)
    den = _mix(alpha, Fc_t, Ff_t)
    num = _mix(alpha, Fc_t1, Ff_t1)
    return I * (num / den)


def _mix(alpha, Fc, Ff):
    # avoid 0 * nan when one leg is absent
    if alpha == 1.0:
        return np.asarray(Fc, dtype=float)
    if alpha == 0.0:
        return np.asarray(Ff, dtype=float)
    return alpha * np.asarray(Fc, dtype=float) + (1.0 - alpha) * np.asarray(Ff, dtype=float)


def holdings(I, alpha, Fc, Ff):
    """Contract quantities ``(Q^c, Q^f)`` whose value equals ``I``."""
    den = _mix(alpha, Fc, Ff)
    return alpha * I / den, (1.0 - alpha) * I / den


class IndexAccumulator:
    """Streaming index update; feed one business day at a time.

    ``update(d, price)`` receives the schedule position ``d`` and a callable
    mapping a curve position to that day's futures prices.
    """

    def __init__(self, schedule, i0=100.0, n=1):
        self.schedule = schedule
        self.value = np.full(n, float(i0))
        self._den = None
        self._day = -1

    def _portfolio(self, d, price):
        a = float(self.schedule.alpha[d])
        fc = price(int(self.schedule.front[d])) if a > 0 else None
        ff = None
        if a < 1:
            sec = int(self.schedule.second[d])
            if sec < 0:
                raise DataError(f"no second contract on {self.schedule.dates[d]}")
            ff = price(sec)
        return a, fc, ff

    def update(self, d, price):
        if d != self._day + 1:
            raise RangeError(f"index days must be fed in order, got {d} after {self._day}")
        if d > 0:
            a, fc, ff = self._portfolio(d - 1, price)
            num = _mix(a, fc, ff)
            _positive(num)
            self.value = self.value * (num / self._den)
        a, fc, ff = self._portfolio(d, price)
        self._den = _mix(a, fc, ff)
        _positive(self._den)
        self._day = d
        return self.value


@dataclass
class IndexPaths:
    """Index values ``values[date, particle]`` on business days."""

    dates: np.ndarray
    times: np.ndarray
    values: np.ndarray
    i0: float = 100.0

    def index_at(self, date):
        d = np.datetime64(to_date(date))
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self.dates) or self.dates[i] != d:
            raise RangeError(f"{to_date(date)} not on the index grid")
        return i

    def at(self, date):
        return self.values[self.index_at(date)]

    def to_csv(self, path, particles=None):
        """Long format with columns date, particle, value."""
        cols = range(self.values.shape[1]) if particles is None else particles
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", "particle", "value"])
            for i, d in enumerate(self.dates):
                for p in cols:
                    w.writerow([str(d), p, repr(float(self.values[i, p]))])


def replicate_index(paths, schedule, i0=100.0):
    """Index along stored futures paths (every business day must be stored)."""
    n = len(paths.dates)
    if n > len(schedule) or np.any(paths.dates != schedule.dates[:n]):
        raise DataError("path dates must match the roll schedule business days")
    acc = IndexAccumulator(schedule, i0, paths.n_particles)
    pos = {c: j for j, c in enumerate(paths.contracts)}
    out = np.empty((n, paths.n_particles))
    for d in range(n):
        def price(c, d=d):
            if c not in pos:
                raise DataError(f"contract {c} missing from the path set")
            return paths.prices[d, pos[c]]
        out[d] = acc.update(d, price)
    return IndexPaths(paths.dates.copy(), paths.times.copy(), out, float(i0))
