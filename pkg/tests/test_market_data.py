import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsci_slv.errors import CalendarError, DataError, RangeError
from gsci_slv.market_data import (ROLL_WEIGHTS, BusinessCalendar, DiscountCurve, FuturesCurve,
                                  QuoteSet, VanillaQuote, build_roll_schedule, default_maturity_map,
                                  discount_factor, load_discount_curve, load_futures_curve,
                                  load_quotes, write_quotes, year_fraction)

VAL = dt.date(2019, 12, 16)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_two_rows_give_curve(tmp_path):
    p = _write(tmp_path, "c.csv", "maturity_date,price\n2020-01-20,60\n2020-02-20,59.5\n")
    c = load_futures_curve(p, VAL)
    assert len(c) == 2
    assert c.prices.tolist() == [60.0, 59.5]


def test_rows_out_of_order_are_sorted(tmp_path):
    a = _write(tmp_path, "a.csv", "maturity_date,price\n2020-01-20,60\n2020-02-20,59.5\n2020-03-20,59\n")
    b = _write(tmp_path, "b.csv", "maturity_date,price\n2020-03-20,59\n2020-01-20,60\n2020-02-20,59.5\n")
    assert load_futures_curve(a, VAL) == load_futures_curve(b, VAL)


def test_negative_price_names_row(tmp_path):
    p = _write(tmp_path, "c.csv", "maturity_date,price\n2020-01-20,60\n2020-02-20,-1\n")
    with pytest.raises(DataError, match="row 3"):
        load_futures_curve(p, VAL)


@pytest.mark.parametrize("body", ["2020-01-20,60\n", "2020-01-20,60\n2020-01-20,61\n"])
def test_curve_rejects_short_or_duplicate(tmp_path, body):
    p = _write(tmp_path, "c.csv", "maturity_date,price\n" + body)
    with pytest.raises(DataError):
        load_futures_curve(p, VAL)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_futures_curve(tmp_path / "nope.csv", VAL)


def test_curve_invariants():
    with pytest.raises(DataError):
        FuturesCurve(VAL, (dt.date(2019, 12, 1), dt.date(2020, 1, 20)), (1.0, 2.0))


def test_discount_examples():
    flat0 = DiscountCurve.flat(0.0)
    assert discount_factor(flat0, 0.0) == 1.0
    assert discount_factor(flat0, 7.3) == 1.0
    flat2 = DiscountCurve.flat(0.02)
    assert discount_factor(flat2, 1.0) == pytest.approx(0.980199, abs=1e-6)
    with pytest.raises(RangeError):
        discount_factor(flat2, 31.0)


def test_discount_log_linear_between_pillars():
    c = DiscountCurve((0.0, 1.0, 2.0), (1.0, 0.97, 0.93))
    # geometric mean of the neighbours at the midpoint
    assert discount_factor(c, 1.5) == pytest.approx(math.sqrt(0.97 * 0.93), rel=1e-14)


def test_discount_loader(tmp_path):
    p = _write(tmp_path, "d.csv", "time,discount_factor\n1,0.98\n2,0.95\n")
    c = load_discount_curve(p)
    assert discount_factor(c, 0.0) == 1.0
    assert discount_factor(c, 2.0) == pytest.approx(0.95)


def _schedule(start=dt.date(2020, 1, 2), end=dt.date(2020, 6, 30), holidays=()):
    cal = BusinessCalendar(holidays)
    mats = tuple(dt.date(2020, m, 20) for m in range(1, 13))
    curve = FuturesCurve(dt.date(2020, 1, 1), mats, tuple(50.0 + i for i in range(12)))
    return cal, build_roll_schedule(cal, start, end, default_maturity_map(curve, cal, start, end))


def test_roll_days_are_fifth_to_ninth_business_day():
    cal, sch = _schedule()
    feb = cal.month_business_days(2020, 2)
    for k, w in zip(range(4, 9), ROLL_WEIGHTS):
        assert sch.alpha_on(feb[k].item()) == pytest.approx(w)
    for d in feb[:4]:
        assert sch.alpha_on(d.item()) == 1.0


def test_roll_window_weights_and_continuity():
    cal, sch = _schedule()
    for y, m in [(2020, 2), (2020, 3), (2020, 4), (2020, 5)]:
        days = cal.month_business_days(y, m)
        idx = [sch.index_of(d.item()) for d in days[4:9]]
        assert sorted(sch.alpha[idx].tolist()) == sorted(ROLL_WEIGHTS)
        second = sch.second[idx[0]]
        after = sch.index_of(days[9].item())
        assert sch.front[after] == second


def test_holidays_shift_roll_window():
    # Feb 2020 opens on Monday the 3rd; a holiday on the 6th pushes the window start to the 10th
    _, base = _schedule()
    assert base.alpha_on(dt.date(2020, 2, 7)) == pytest.approx(0.8)
    _, sch = _schedule(holidays=[dt.date(2020, 2, 6)])
    assert sch.alpha_on(dt.date(2020, 2, 7)) == 1.0
    assert sch.alpha_on(dt.date(2020, 2, 10)) == pytest.approx(0.8)


def test_short_month_raises():
    hol = [dt.date(2020, 2, d) for d in range(3, 22)]
    with pytest.raises(CalendarError):
        _schedule(holidays=hol)


def _quote(kind, m, date):
    return VanillaQuote(kind, 1.0, 100 * m, "price", 1.0, 1.0, m, None, dt.date(2020, 12, 16), date)


def test_snapshots_must_share_keys():
    a = [_quote("on_index", 1.0, VAL)]
    b = [_quote("on_index", 1.1, VAL)]
    with pytest.raises(DataError):
        QuoteSet(tuple(a), (tuple(a), tuple(b)))


def test_quote_roundtrip_and_vol_conversion(tmp_path, curve, discount):
    from gsci_slv.pricing import black_price

    p = _write(tmp_path, "q.csv",
               "kind,expiry,underlying,strike_or_moneyness,quote_type,value,quote_date\n"
               "on_futures,2020-06-16,2020-06-22,55,vol,0.3,2019-12-16\n"
               "on_futures,6M,2020-06-22,60,price,4.2,2019-12-16\n")
    q = load_quotes(p, curve, discount)
    t = year_fraction(VAL, dt.date(2020, 6, 16))
    F = curve.price(dt.date(2020, 6, 22))
    by_strike = {x.strike: x for x in q}
    assert by_strike[55.0].price == pytest.approx(black_price(F, 55, t, 0.3, discount_factor(discount, t)))
    write_quotes(q.quotes, tmp_path / "q2.csv")
    assert load_quotes(tmp_path / "q2.csv", curve, discount) == q


def test_index_file_gives_two_snapshots():
    from pathlib import Path

    from gsci_slv import synthetic as sy

    curve, disc = sy.wti_like_curve(), sy.flat_discount()
    q = load_quotes(Path(__file__).parents[1] / "data" / "index_quotes.csv", curve, disc)
    assert len(q.snapshots) == 2
    assert len(q.snapshots[0]) == len(q.snapshots[1]) == 84


def test_option_after_maturity_rejected(tmp_path, curve, discount):
    p = _write(tmp_path, "q.csv",
               "kind,expiry,underlying,strike_or_moneyness,quote_type,value,quote_date\n"
               "on_futures,2020-07-16,2020-06-22,55,vol,0.3,\n")
    with pytest.raises(DataError):
        load_quotes(p, curve, discount)


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(6))))
def test_loader_order_insensitive(tmp_path_factory, perm):
    d = tmp_path_factory.mktemp("perm")
    rows = [f"2020-{m:02d}-20,{60 - m}\n" for m in range(1, 7)]
    p = d / "c.csv"
    p.write_text("maturity_date,price\n" + "".join(rows[i] for i in perm))
    c = load_futures_curve(p, VAL)
    assert c.maturities == tuple(dt.date(2020, m, 20) for m in range(1, 7))
