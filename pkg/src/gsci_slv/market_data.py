"""Market inputs: futures curves, discounting, vanilla quotes and GSCI roll schedules.

All year fractions use ACT/365 fixed from the curve valuation date.
"""

import csv
import datetime as dt
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalendarError, DataError, RangeError

DAYS_PER_YEAR = 365.0
ROLL_FIRST_DAY = 5
ROLL_LAST_DAY = 9
# end-of-day front-contract weights on business days 5..9
ROLL_WEIGHTS = (0.8, 0.6, 0.4, 0.2, 0.0)


def to_date(value):
    """Coerce an ISO string, ``datetime.date`` or ``numpy.datetime64`` to a date."""
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    if isinstance(value, np.datetime64):
        return value.astype("datetime64[D]").item()
    try:
        return dt.date.fromisoformat(str(value).strip())
    except ValueError as exc:
        raise DataError(f"not an ISO-8601 date: {value!r}") from exc


def year_fraction(start, end):
    """ACT/365 fixed year fraction between two dates."""
    return (to_date(end) - to_date(start)).days / DAYS_PER_YEAR


def add_months(date, months):
    """Shift a date by whole months, clamping the day to the month length."""
    date = to_date(date)
    m = date.month - 1 + months
    year, month = date.year + m // 12, m % 12 + 1
    last = (dt.date(year + month // 12, month % 12 + 1, 1) - dt.timedelta(days=1)).day
    return dt.date(year, month, min(date.day, last))


# ---------------------------------------------------------------------------
# Futures curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FuturesCurve:
    """Initial futures term structure F_0(T_i) on ascending maturities."""

    valuation_date: dt.date
    maturities: tuple
    prices: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "valuation_date", to_date(self.valuation_date))
        mats = tuple(to_date(m) for m in self.maturities)
        prices = np.asarray(self.prices, dtype=float)
        object.__setattr__(self, "maturities", mats)
        object.__setattr__(self, "prices", prices)
        if len(mats) < 2:
            raise DataError("a futures curve needs at least two contracts")
        if prices.shape != (len(mats),):
            raise DataError("maturities and prices differ in length")
        if any(b <= a for a, b in zip(mats, mats[1:])):
            raise DataError("maturities must be strictly ascending")
        if mats[0] <= self.valuation_date:
            raise DataError("all maturities must lie after the valuation date")
        if not np.all(np.isfinite(prices)) or np.any(prices <= 0):
            raise DataError("futures prices must be positive")
        prices.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, FuturesCurve):
            return NotImplemented
        return (self.valuation_date == other.valuation_date and self.maturities == other.maturities
                and np.array_equal(self.prices, other.prices))

    def __hash__(self):
        return hash((self.valuation_date, self.maturities, self.prices.tobytes()))

    def __len__(self):
        return len(self.maturities)

    @property
    def times(self):
        """Maturities as year fractions from the valuation date."""
        return np.array([year_fraction(self.valuation_date, m) for m in self.maturities])

    def index_of(self, maturity):
        """Position of a maturity date on the curve."""
        try:
            return self.maturities.index(to_date(maturity))
        except ValueError:
            raise RangeError(f"maturity {maturity} is not on the curve") from None

    def price(self, maturity, interpolate=False):
        """F_0(T) for a maturity date or year fraction.

        Off-grid maturities are linearly interpolated in time when
        ``interpolate`` is set, otherwise they raise :class:`RangeError`.
        """
        if isinstance(maturity, (int, np.integer)) and not isinstance(maturity, bool):
            return float(self.prices[maturity])
        if isinstance(maturity, (float, np.floating)):
            times = self.times
            hit = np.nonzero(np.isclose(times, maturity, rtol=0.0, atol=1e-12))[0]
            if hit.size:
                return float(self.prices[hit[0]])
            if not interpolate or not times[0] <= maturity <= times[-1]:
                raise RangeError(f"maturity t={maturity} is not on the curve")
            return float(np.interp(maturity, times, self.prices))
        date = to_date(maturity)
        if date in self.maturities:
            return float(self.prices[self.maturities.index(date)])
        if not interpolate:
            raise RangeError(f"maturity {date} is not on the curve")
        return self.price(year_fraction(self.valuation_date, date), interpolate=True)


def load_futures_curve(source, valuation_date):
    """Read a ``maturity_date,price`` CSV into a validated :class:`FuturesCurve`."""
    rows = _read_csv(source, ("maturity_date", "price"))
    seen = {}
    for lineno, row in rows:
        maturity = to_date(row["maturity_date"])
        try:
            price = float(row["price"])
        except ValueError:
            raise DataError(f"row {lineno}: price {row['price']!r} is not a number") from None
        if not price > 0:
            raise DataError(f"row {lineno}: non-positive price {price} for {maturity}")
        if maturity in seen:
            raise DataError(f"row {lineno}: duplicate maturity {maturity}")
        seen[maturity] = price
    if len(seen) < 2:
        raise DataError(f"{source}: a futures curve needs at least two rows")
    mats = sorted(seen)
    return FuturesCurve(valuation_date, tuple(mats), np.array([seen[m] for m in mats]))


def write_futures_curve(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["maturity_date", "price"])
        for m, p in zip(curve.maturities, curve.prices):
            w.writerow([m.isoformat(), repr(float(p))])


# ---------------------------------------------------------------------------
# Discounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscountCurve:
    """Zero-coupon bond prices P_0(t), log-linear between pillars."""

    times: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        factors = np.asarray(self.factors, dtype=float)
        if times.ndim != 1 or times.shape != factors.shape or times.size < 1:
            raise DataError("discount pillars and factors must be 1-d of equal length")
        if times[0] != 0.0:
            times = np.concatenate([[0.0], times])
            factors = np.concatenate([[1.0], factors])
        if factors[0] != 1.0:
            raise DataError("P_0(0) must equal 1")
        if np.any(np.diff(times) <= 0):
            raise DataError("discount pillars must be strictly ascending")
        if np.any(factors <= 0) or np.any(factors > 1) or np.any(np.diff(factors) > 0):
            raise DataError("discount factors must lie in (0,1] and be non-increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "factors", factors)

    @classmethod
    def flat(cls, rate, horizon=30.0):
        """Continuously-compounded flat curve up to ``horizon`` years."""
        if rate < 0:
            raise DataError("flat discount rate must be non-negative")
        return cls(np.array([0.0, horizon]), np.array([1.0, np.exp(-rate * horizon)]))

    def __call__(self, t):
        return discount_factor(self, t)


def discount_factor(curve, t):
    """P_0(t), log-linear in the discount factor between pillars."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > curve.times[-1] * (1 + 1e-12)):
        raise RangeError(f"t outside discount curve [0, {curve.times[-1]}]")
    out = np.exp(np.interp(t, curve.times, np.log(curve.factors)))
    return float(out) if out.ndim == 0 else out


def load_discount_curve(source):
    """Read a ``time,discount_factor`` CSV."""
    rows = _read_csv(source, ("time", "discount_factor"))
    try:
        pairs = sorted((float(r["time"]), float(r["discount_factor"])) for _, r in rows)
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None
    if not pairs:
        raise DataError(f"{source}: empty discount curve")
    times, factors = map(np.array, zip(*pairs))
    return DiscountCurve(times, factors)


def write_discount_curve(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "discount_factor"])
        for t, p in zip(curve.times, curve.factors):
            w.writerow([repr(float(t)), repr(float(p))])


# ---------------------------------------------------------------------------
# Vanilla quotes
# ---------------------------------------------------------------------------

ON_FUTURES = "on_futures"
ON_INDEX = "on_index"


@dataclass(frozen=True)
class VanillaQuote:
    """A call quote on a futures contract or on the index.

    ``strike`` is absolute. For index quotes ``moneyness`` is K / I_0; for
    futures quotes it is K / F_0(T). ``price`` is always the premium, filled
    in from an implied vol at load time when ``quote_type == "vol"``.
    """

    kind: str
    expiry: float
    strike: float
    quote_type: str
    value: float
    price: float
    moneyness: float
    underlying: dt.date = None
    expiry_date: dt.date = None
    quote_date: dt.date = None

    def __post_init__(self):
        if self.kind not in (ON_FUTURES, ON_INDEX):
            raise DataError(f"unknown quote kind {self.kind!r}")
        if not self.expiry > 0:
            raise DataError("quote expiry must be positive")
        if not self.strike > 0:
            raise DataError("quote strike must be positive")
        if self.quote_type not in ("price", "vol"):
            raise DataError(f"unknown quote type {self.quote_type!r}")

    @property
    def key(self):
        return (self.kind, round(self.expiry, 10), self.underlying, round(self.moneyness, 10))


@dataclass(frozen=True)
class QuoteSet:
    """Quotes grouped for calibration; index quotes may carry two snapshots."""

    quotes: tuple
    snapshots: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "quotes", tuple(self.quotes))
        if not self.quotes:
            raise DataError("a quote set needs at least one quote")
        snaps = tuple(tuple(s) for s in self.snapshots)
        if snaps:
            keys = [sorted(q.key for q in s) for s in snaps]
            if any(k != keys[0] for k in keys[1:]):
                raise DataError("quote snapshots do not share identical keys")
        object.__setattr__(self, "snapshots", snaps)

    def __len__(self):
        return len(self.quotes)

    def __iter__(self):
        return iter(self.quotes)

    def of_kind(self, kind):
        return QuoteSet(tuple(q for q in self.quotes if q.kind == kind)) if any(
            q.kind == kind for q in self.quotes) else None

    @property
    def expiries(self):
        return sorted({q.expiry for q in self.quotes})

    @classmethod
    def from_snapshots(cls, first, second):
        """Pair two dated snapshots; both are sorted on their keys."""
        first = sorted(first, key=lambda q: q.key)
        second = sorted(second, key=lambda q: q.key)
        return cls(tuple(first), (tuple(first), tuple(second)))


_TENOR = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([DdWwMmYy])\s*$")


def _parse_expiry(text, valuation_date, calendar=None):
    """Expiry as ISO date, tenor (``3M``, ``1Y``) or year fraction."""
    text = str(text).strip()
    m = _TENOR.match(text)
    if m:
        n, unit = float(m.group(1)), m.group(2).upper()
        if unit in "MY" and n == int(n):
            date = add_months(valuation_date, int(n) * (12 if unit == "Y" else 1))
        elif unit == "W":
            date = to_date(valuation_date) + dt.timedelta(days=int(round(7 * n)))
        else:
            date = to_date(valuation_date) + dt.timedelta(days=int(round(n * (365 if unit == "Y" else 1))))
        if calendar is not None:
            date = calendar.roll_forward(date)
        return year_fraction(valuation_date, date), date
    try:
        return float(text), None
    except ValueError:
        date = to_date(text)
        return year_fraction(valuation_date, date), date


def load_quotes(source, curve, discount, index_level=100.0, calendar=None):
    """Read a quote CSV.

    Columns: ``kind,expiry,underlying,strike_or_moneyness,quote_type,value,quote_date``.
    For futures quotes the strike column is an absolute strike and
    ``underlying`` the contract maturity; for index quotes it is the
    moneyness K / I_0 and ``underlying`` is empty. Implied vols are converted
    to Black-76 prices with forward F_0(T) (futures) or ``index_level`` (index).
    Returns a :class:`QuoteSet`; index quotes with two distinct
    ``quote_date`` values become a two-snapshot set.
    """
    from .pricing import black_price

    cols = ("kind", "expiry", "underlying", "strike_or_moneyness", "quote_type", "value", "quote_date")
    quotes = []
    for lineno, row in _read_csv(source, cols):
        kind = row["kind"].strip()
        try:
            t, expiry_date = _parse_expiry(row["expiry"], curve.valuation_date, calendar)
            level = float(row["strike_or_moneyness"])
            value = float(row["value"])
        except (ValueError, DataError) as exc:
            raise DataError(f"row {lineno}: {exc}") from None
        qtype = row["quote_type"].strip().lower()
        qdate = to_date(row["quote_date"]) if row["quote_date"].strip() else None
        if not t > 0:
            raise DataError(f"row {lineno}: expiry must lie after the valuation date")
        if not level > 0:
            raise DataError(f"row {lineno}: strike must be positive")
        df = discount_factor(discount, t)
        if kind == ON_FUTURES:
            underlying = to_date(row["underlying"])
            try:
                fwd = curve.price(underlying)
            except RangeError as exc:
                raise DataError(f"row {lineno}: {exc}") from None
            if t > year_fraction(curve.valuation_date, underlying) + 1e-12:
                raise DataError(f"row {lineno}: option expiry after futures maturity")
            strike, moneyness = level, level / fwd
        elif kind == ON_INDEX:
            underlying, fwd = None, index_level
            strike, moneyness = level * index_level, level
        else:
            raise DataError(f"row {lineno}: unknown kind {kind!r}")
        if qtype == "vol":
            price = black_price(fwd, strike, t, value, df)
        elif qtype == "price":
            price = value
        else:
            raise DataError(f"row {lineno}: quote_type must be 'price' or 'vol'")
        quotes.append(VanillaQuote(kind, t, strike, qtype, value, float(price), moneyness,
                                   underlying, expiry_date, qdate))
    if not quotes:
        raise DataError(f"{source}: no quotes")
    index_q = [q for q in quotes if q.kind == ON_INDEX]
    dates = sorted({q.quote_date for q in index_q if q.quote_date is not None})
    if len(dates) == 2 and len(index_q) == len(quotes):
        first = [q for q in index_q if q.quote_date == dates[0]]
        second = [q for q in index_q if q.quote_date == dates[1]]
        return QuoteSet.from_snapshots(first, second)
    if len(dates) > 2 and len(index_q) == len(quotes):
        raise DataError("at most two index quote snapshots are supported")
    return QuoteSet(tuple(sorted(quotes, key=lambda q: q.key)))


def write_quotes(quotes, path, index_level=100.0):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "expiry", "underlying", "strike_or_moneyness", "quote_type", "value", "quote_date"])
        for q in quotes:
            expiry = q.expiry_date.isoformat() if q.expiry_date else repr(q.expiry)
            level = q.moneyness if q.kind == ON_INDEX else q.strike
            w.writerow([q.kind, expiry, q.underlying.isoformat() if q.underlying else "",
                        repr(float(level)), q.quote_type, repr(float(q.value)),
                        q.quote_date.isoformat() if q.quote_date else ""])


# ---------------------------------------------------------------------------
# Calendar and roll schedule
# ---------------------------------------------------------------------------

class BusinessCalendar:
    """Weekend calendar with optional holidays, backed by ``numpy.busdaycalendar``."""

    def __init__(self, holidays=()):
        self.holidays = tuple(sorted(to_date(h) for h in holidays))
        self._cal = np.busdaycalendar(holidays=[np.datetime64(h) for h in self.holidays])

    @classmethod
    def from_file(cls, path):
        """One ISO date per line; blank lines and ``#`` comments ignored."""
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.split("#")[0].strip() for ln in lines if ln.split("#")[0].strip()])

    def is_business_day(self, date):
        return bool(np.is_busday(np.datetime64(to_date(date)), busdaycal=self._cal))

    def roll_forward(self, date):
        return np.busday_offset(np.datetime64(to_date(date)), 0, roll="forward",
                                busdaycal=self._cal).item()

    def business_days(self, start, end):
        """Business days in the closed interval [start, end]."""
        lo = np.datetime64(to_date(start))
        hi = np.datetime64(to_date(end)) + np.timedelta64(1, "D")
        days = np.arange(lo, hi, dtype="datetime64[D]")
        return days[np.is_busday(days, busdaycal=self._cal)]

    def month_business_days(self, year, month):
        first = dt.date(year, month, 1)
        return self.business_days(first, add_months(first, 1) - dt.timedelta(days=1))


def expiry_after(valuation_date, months, calendar=None):
    """Business day ``months`` calendar months after ``valuation_date`` (rolled forward)."""
    cal = calendar or BusinessCalendar()
    return cal.roll_forward(add_months(valuation_date, months))


@dataclass(frozen=True)
class RollSchedule:
    """Daily front/second assignment and end-of-day front weight alpha.

    Arrays are aligned on ``dates`` (business days). On day ``d`` the
    portfolio held overnight into ``d+1`` is ``alpha[d]`` front contract
    ``front[d]`` and ``1 - alpha[d]`` second contract ``second[d]`` in
    quantity terms. ``second`` is -1 where the next contract is unknown.
    """

    dates: np.ndarray
    front: np.ndarray
    second: np.ndarray
    alpha: np.ndarray
    windows: tuple = ()

    def __len__(self):
        return len(self.dates)

    def index_of(self, date):
        d = np.datetime64(to_date(date))
        i = int(np.searchsorted(self.dates, d))
        if i >= len(self.dates) or self.dates[i] != d:
            raise RangeError(f"{to_date(date)} is not a business day of the schedule")
        return i

    def alpha_on(self, date):
        return float(self.alpha[self.index_of(date)])

    def contracts(self, stop=None):
        """Curve indices referenced by front/second up to position ``stop``."""
        sl = slice(0, stop)
        used = set(self.front[sl].tolist()) | set(self.second[sl][self.alpha[sl] < 1].tolist())
        return sorted(c for c in used if c >= 0)

    def truncate(self, end):
        """Schedule restricted to dates up to and including ``end``."""
        stop = int(np.searchsorted(self.dates, np.datetime64(to_date(end)), side="right"))
        return RollSchedule(self.dates[:stop], self.front[:stop], self.second[:stop],
                            self.alpha[:stop], self.windows)


def default_maturity_map(curve, calendar, start, end):
    """Month -> contract rolled out of during that month's window.

    The front contract for month ``m`` is the first contract maturing after
    the month's 9th business day; the roll targets the front of ``m + 1``.
    Covers the months of [start, end] plus two following months where the
    curve allows.
    """
    out = {}
    month = to_date(start).replace(day=1)
    last = add_months(to_date(end).replace(day=1), 2)
    while month <= last:
        days = calendar.month_business_days(month.year, month.month)
        cutoff = days[min(ROLL_LAST_DAY, len(days)) - 1].item() if len(days) else month
        live = [i for i, m in enumerate(curve.maturities) if m > cutoff]
        if live:
            out[(month.year, month.month)] = live[0]
        month = add_months(month, 1)
    return out


def build_roll_schedule(calendar, start, end, maturity_map):
    """Business-day roll schedule on [start, end].

    ``maturity_map`` maps ``(year, month)`` to the curve index of the
    contract held as front when that month's window opens. The window on
    business days 5..9 rolls into ``maturity_map[next month]``; when the two
    coincide the month has no roll.
    """
    start, end = to_date(start), to_date(end)
    if end < start:
        raise CalendarError("schedule end precedes start")
    dates, front, second, alpha, windows = [], [], [], [], []
    month = start.replace(day=1)
    while month <= end:
        key = (month.year, month.month)
        nxt = add_months(month, 1)
        nkey = (nxt.year, nxt.month)
        nnxt = add_months(month, 2)
        nnkey = (nnxt.year, nnxt.month)
        days = calendar.month_business_days(month.year, month.month)
        if len(days) < ROLL_LAST_DAY:
            raise CalendarError(f"{month:%Y-%m} has only {len(days)} business days")
        if key not in maturity_map:
            raise CalendarError(f"no contract assigned to {month:%Y-%m}")
        cur = maturity_map[key]
        nxt_c = maturity_map.get(nkey, -1)
        after = maturity_map.get(nnkey, -1)
        rolls = nxt_c >= 0 and nxt_c != cur
        window_days = days[ROLL_FIRST_DAY - 1:ROLL_LAST_DAY]
        if rolls and any(start <= d.item() <= end for d in window_days):
            windows.append(tuple(d.item() for d in window_days))
        for b, day in enumerate(days, start=1):
            d = day.item()
            if d < start or d > end:
                continue
            if not rolls:
                f, s, a = cur, nxt_c if nxt_c != cur else after, 1.0
            elif b < ROLL_FIRST_DAY:
                f, s, a = cur, nxt_c, 1.0
            elif b <= ROLL_LAST_DAY:
                f, s, a = cur, nxt_c, ROLL_WEIGHTS[b - ROLL_FIRST_DAY]
            else:
                if nxt_c < 0:
                    raise CalendarError(f"no contract to roll into after {month:%Y-%m}")
                f, s, a = nxt_c, after, 1.0
            dates.append(day)
            front.append(f)
            second.append(s)
            alpha.append(a)
        month = nxt
    if not dates:
        raise CalendarError("no business days in the requested range")
    return RollSchedule(np.array(dates, dtype="datetime64[D]"), np.array(front, dtype=int),
                        np.array(second, dtype=int), np.array(alpha), tuple(windows))


def _read_csv(source, required):
    path = Path(source)
    if not path.exists():
        raise DataError(f"{source}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{source}: missing columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v if v is not None else "") for k, v in row.items() if k}
            if not any(v.strip() for v in row.values()):
                continue
            rows.append((lineno, row))
    return rows
