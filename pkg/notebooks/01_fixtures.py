"""
Synthetic market fixtures
=========================

Builds the WTI-like curve, discount curve, futures option quotes and the
two-snapshot index quotes shipped in ``data/``. Index quotes come from the
particle model at a known parameter set so a calibration run has a truth.
"""

# %%
# Curve and roll schedule
import numpy as np

from gsci_slv import synthetic as sy

curve = sy.wti_like_curve()
disc = sy.flat_discount()
schedule = sy.schedule_for(curve)
for m, p in zip(curve.maturities[:6], curve.prices[:6]):
    print(m, f"{p:.3f}")

# %%
# The first roll window: front weight steps down by 0.2 a day
first = schedule.index_of(schedule.windows[0][0])
for d in range(first - 1, first + 6):
    print(schedule.dates[d], schedule.front[d], schedule.second[d], schedule.alpha[d])

# %%
# Futures option quotes from a skewed implied vol surface
quotes = sy.futures_quotes(curve, disc)
print(len(quotes.quotes), "futures option quotes")

# %%
# Write every fixture (a 50k-particle run prices the index quotes)
sy.write_fixtures("data")
print(sorted(__import__("os").listdir("data")))
print("truth:", sy.TRUTH, np.round(list(sy.TRUTH.values()), 3))
