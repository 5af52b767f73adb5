"""Zero-inflated bivariate spatial modelling of wildfire counts and burnt areas."""

__version__ = "0.1.0"
