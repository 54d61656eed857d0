"""Monte Carlo XVA engine for cleared and bilateral interest-rate swaps."""

__version__ = "0.1.0"
