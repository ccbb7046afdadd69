"""Statistical lab: Gaussian mixture-of-experts estimation on synthetic data.

Conditional density with competition-style gating, box-constrained maximum
likelihood, Voronoi-cell parameter losses, total-variation distance, and the
convergence-rate experiments built from those pieces.
"""

from .density import (
    Atom,
    MixingMeasure,
    ResolutionError,
    density,
    expert_outputs,
    gate_log_weights,
    log_density,
    sample_dataset,
    tv_distance,
)
from .mle import FitResult, fit_mle, nll_and_grad, param_bounds
from .rates import (
    RateLabSpec,
    RateRow,
    bootstrap_slope_ci,
    ffn_truth,
    fit_loglog_slope,
    linear_truth,
    median_slopes,
    raw_slope_with_ci,
    read_rate_csv,
    run_rate_experiment,
    write_rate_csv,
)
from .voronoi import cell_errors, loss_l1, loss_l2, normalize_mass, voronoi_assign

__all__ = [
    "Atom",
    "MixingMeasure",
    "ResolutionError",
    "density",
    "expert_outputs",
    "gate_log_weights",
    "log_density",
    "sample_dataset",
    "tv_distance",
    "FitResult",
    "fit_mle",
    "nll_and_grad",
    "param_bounds",
    "voronoi_assign",
    "loss_l1",
    "loss_l2",
    "cell_errors",
    "normalize_mass",
    "RateLabSpec",
    "RateRow",
    "linear_truth",
    "ffn_truth",
    "run_rate_experiment",
    "median_slopes",
    "fit_loglog_slope",
    "bootstrap_slope_ci",
    "raw_slope_with_ci",
    "write_rate_csv",
    "read_rate_csv",
]
