"""Deep BSDE pricing and discrete delta-gamma hedging of option portfolios."""

__version__ = "0.1.0"
