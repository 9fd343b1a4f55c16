"""Weighted Monte Carlo calibration to vanilla and forward-start markets.

Paths from any generator are reweighted by convex programs so that they
reprice a vanilla surface exactly while keeping the weights, the forward
smile and the implied variance under control. Exotic prices then come with
a band over the feasible weights.
"""

__version__ = "0.1.0"

from .errors import (CalendarArbitrageError, ConvergenceError, DegenerateVegaError, DomainError,
                     InfeasibleError, NoSolutionError, PreconditionError, SmartMCError, SolverError)
from .black import bs_call_price, bs_vega, implied_vol, forward_start_black_price, static_forward_vol
from .paths import ModelSpec, PathSet, generate_paths, merton_to_heston
from .surface import VanillaSurface, load_surface, synth_surface, mfiv, mfiv_anchor
from .payoffs import InstrumentSpec, PayoffMatrix, payoff_matrix, reverse_cliquet
from .conic import CalibrationSpec, Regime, minmax_price, solve
from .calibrator import CalibratedModel, CalibrationData, calibrate
from .bands import PriceBand, price_band, spread_metrics, model_risk_rel
from .diagnostics import mass_split_test, pool_replications, projector_distance, span_projector

__all__ = [n for n in dir() if not n.startswith("_")]
