"""
Local volatility in normalised spot coordinates
===============================================

Calibrates eta(t, k) to futures vanillas, checks the repricing residuals
and compares the forward PDE with Black prices in the flat case.
"""

# %%
import numpy as np

from gsci_slv import synthetic as sy
from gsci_slv.dupire_lv import (LocalVolSurface, PDEGrid, calibrate_local_vol, reprice_quotes,
                                solve_normalized_calls)
from gsci_slv.pricing import black_price

curve = sy.wti_like_curve()
disc = sy.flat_discount()

# %%
# Flat eta with a = 0 is Black: compare the 1y layer
sol = solve_normalized_calls(LocalVolSurface.flat(0.3), 0.0, PDEGrid(n_k=400, steps_per_year=400), horizon=1.0)
for k in (0.8, 1.0, 1.2):
    print(k, f"{sol(1.0, k):.6f}", f"{black_price(1.0, k, 1.0, 0.3):.6f}")

# %%
# Fit to the skewed quotes at a = 0.3
quotes = sy.futures_quotes(curve, disc)
surface = calibrate_local_vol(quotes, curve, disc, 0.3)
print("time knots", np.round(surface.time_knots, 3))
print("strike knots", np.round(surface.strike_knots, 3))
print(np.round(surface.values, 3))

# %%
# Residuals in price units
model = reprice_quotes(surface, quotes, curve, disc)
market = np.array([q.price for q in quotes])
print("max |residual|", np.nanmax(np.abs(model - market)))

# %%
# Round trip: quotes from flat eta = 0.25 recover 0.25
flat = calibrate_local_vol(sy.flat_eta_quotes(curve, disc, 0.25, 0.3), curve, disc, 0.3)
print("max knot error", np.max(np.abs(flat.values - 0.25)))
