"""Bayesian bivariate meta-analysis of two binary outcomes with normal, binomial and Frank-copula likelihoods."""

__version__ = "0.1.0"

from .copula import frank_cdf, spearman_rho, theta_from_spearman  # noqa: E402
from .core_types import ArmDependence, PosteriorSummary, StudyRecord, load_dataset  # noqa: E402
from .mcmc import SamplerConfig, run_chains, summarize  # noqa: E402
from .models import build_model  # noqa: E402

__all__ = [
    "ArmDependence", "PosteriorSummary", "SamplerConfig", "StudyRecord", "build_model", "frank_cdf",
    "load_dataset", "run_chains", "spearman_rho", "summarize", "theta_from_spearman",
]
