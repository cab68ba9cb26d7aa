"""Cost-bounded, time-varying feature acquisition for multivariate time series."""

__version__ = "0.1.0"

FILL_VALUE = -4.0
