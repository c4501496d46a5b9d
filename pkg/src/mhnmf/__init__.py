"""Bayesian Poisson NMF with Metropolis-Hastings-within-Gibbs samplers."""

__version__ = "0.1.0"

from .model import ContractError, SamplerKind  # noqa: E402
from .chain import ConvergenceControls, ModelConfig, run_chain  # noqa: E402
from .rank import run_min_bic  # noqa: E402
from .simulate import SimConfig, simulate  # noqa: E402

__all__ = ["ContractError", "SamplerKind", "ConvergenceControls", "ModelConfig",
           "run_chain", "run_min_bic", "SimConfig", "simulate", "__version__"]
