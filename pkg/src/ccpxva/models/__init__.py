"""Short-rate, intensity and correlation models."""
from .cir import CirParams, CirPlusPlus, CirShift, cir_bond, cir_forward, fit_cir_shift
from .correlation import (CorrelationError, CorrelationSpec, effective_correlation, max_attainable,
                          solve_driver_correlations)
from .g2 import G2Params, calibrate_g2, g2_zcb, load_g2_params, save_g2_params, swaption_price

__all__ = [
    "CirParams", "CirPlusPlus", "CirShift", "cir_bond", "cir_forward", "fit_cir_shift",
    "CorrelationError", "CorrelationSpec", "effective_correlation", "max_attainable",
    "solve_driver_correlations",
    "G2Params", "calibrate_g2", "g2_zcb", "load_g2_params", "save_g2_params", "swaption_price",
]
