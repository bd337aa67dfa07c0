"""Multivariate quantile regression with random effects and hidden Markov states."""

from .bootstrap import BootstrapResult, block_bootstrap
from .criteria import aic, bic, n_free_params
from .data import (DataFormatError, LongitudinalDataset, PosteriorSet, QMHMMParams, Subject,
                   read_long_csv, validate, write_long_csv)
from .em import FitConfig, FitFailure, FitResult, e_step, fit, m_step, observed_loglik
from .mal import MALParams, QuantileSpec, gig_expectations, mal_log_density, mal_sample
from .selection import GridResult, grid_search
from .special import bessel_k_ratio, log_bessel_k

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult", "block_bootstrap", "aic", "bic", "n_free_params", "DataFormatError",
    "LongitudinalDataset", "PosteriorSet", "QMHMMParams", "Subject", "read_long_csv", "validate",
    "write_long_csv", "FitConfig", "FitFailure", "FitResult", "e_step", "fit", "m_step",
    "observed_loglik", "MALParams", "QuantileSpec", "gig_expectations", "mal_log_density",
    "mal_sample", "GridResult", "grid_search", "bessel_k_ratio", "log_bessel_k",
]
