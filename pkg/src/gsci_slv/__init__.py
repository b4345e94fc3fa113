"""Two-factor stochastic local volatility model for commodity futures and
excess-return commodity index options.

Modules
-------
market_data   futures/discount curves, quotes, business calendar, roll schedule
dupire_lv     extended Dupire PDE and local volatility calibration
slv_mc        interacting-particle SLV Monte Carlo
index_engine  excess-return index replication along futures paths
pricing       Black-76, index vanillas by Monte Carlo, sensitivity scans
calibrator    losses and the hybrid ESCH + Subplex calibration
cli           batch command-line front end
"""

from .errors import (CalendarError, CalibrationError, ConfigError, DataError, DomainError,
                     NumericsError, ParamError, RangeError, SLVError)

__version__ = "0.1.0"

__all__ = ["CalendarError", "CalibrationError", "ConfigError", "DataError", "DomainError",
           "NumericsError", "ParamError", "RangeError", "SLVError", "__version__"]
