"""Risk-averse control of linear systems driven by periodic ARMA noise."""

__version__ = "0.1.0"
