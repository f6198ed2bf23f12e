"""snpekit: likelihood-free Bayesian inference with neural posterior models.

Trains mixture-density posteriors over adaptive simulation rounds, ships the
neuron simulators and baselines needed to evaluate them, and exposes a
config-driven CLI (`snpekit simulate|infer|compare|eval`).
"""

__version__ = "0.1.0"

from .distributions import BoxUniform, DiagonalGaussian, GaussianMixture
from .optim import AdamState, GradReport, ParamStore, value_and_grad

__all__ = [
    "BoxUniform",
    "DiagonalGaussian",
    "GaussianMixture",
    "AdamState",
    "GradReport",
    "ParamStore",
    "value_and_grad",
    "__version__",
]
