"""Inverse-optimisation decomposition and forecasting of behind-the-meter demand."""
from .data import Dataset, SyntheticSpec, default_bounds, generate_synthetic, load, load_csv, save
from .estimator import FlexibleDemandIO
from .fit import FitConfig, FitResult, SolverMode, fit, reconstruction_loss, verify_fit
from .fop import FopSolution, kkt_residual, solve_fop, solve_shed, solve_shift_given_binaries
from .forecast import Forecast, point_forecast, quantile_forecast
from .kernel import KernelEnvelopeModel, envelope_forecast, envelope_train_expr
from .metrics import DEFAULT_LEVELS, crps_from_quantiles, mae, pinball, rmse, seasonal_naive
from .model import (
    ComfortCosts,
    DaySample,
    DemandAttributes,
    FlexBounds,
    FlexDecision,
    Hyperparams,
    PriceSignal,
    build_comfort_costs,
    build_tou_prices,
    compute_weights,
    consumer_utility,
)

__version__ = "0.1.0"
