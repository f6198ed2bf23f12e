"""Bernoulli GLM: spikes driven by a filtered frozen white-noise input."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class GlmSpec:
    """y_i ~ Bern(eta(v_i . beta)) with the canonical logistic link.

    The white-noise input is frozen by `input_seed`, so the observed data and
    every simulation share one design matrix and the sufficient statistics
    are well defined.
    """

    filter_dim: int = 10
    n_bins: int = 100
    input_seed: int = 42


@lru_cache(maxsize=8)
def _design_matrix(filter_dim, n_bins, input_seed):
    u = np.random.default_rng(input_seed).standard_normal(n_bins + filter_dim - 1)
    # row i holds the input window [u_i, u_{i-1}, ..., u_{i-d+1}]
    idx = (filter_dim - 1 + np.arange(n_bins))[:, None] - np.arange(filter_dim)[None, :]
    return u[idx]


def sigmoid(u):
    out = np.empty_like(u, dtype=np.float64)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    ez = np.exp(u[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class BernoulliGlmSimulator:
    def __init__(self, spec):
        self.spec = spec

    @property
    def theta_names(self):
        return tuple(f"beta{i}" for i in range(self.spec.filter_dim))

    @property
    def design(self):
        return _design_matrix(self.spec.filter_dim, self.spec.n_bins, self.spec.input_seed)

    def spike_probabilities(self, beta):
        return sigmoid(self.design @ np.asarray(beta, dtype=np.float64))

    def simulate(self, beta, seed):
        """Returns the binary spike train; the input design is self.design."""
        rng = np.random.default_rng(seed)
        p = self.spike_probabilities(beta)
        return (rng.random(self.spec.n_bins) < p).astype(np.float64)

    def simulate_batch(self, betas, seeds):
        return [self.simulate(b, s) for b, s in zip(betas, seeds)]

    def log_likelihood(self, beta, y):
        """Exact Bernoulli log-likelihood, stable in the saturated regime."""
        drive = self.design @ np.asarray(beta, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        # log eta = -softplus(-u), log(1 - eta) = -softplus(u)
        softplus = lambda u: np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))
        return float(-(y * softplus(-drive) + (1.0 - y) * softplus(drive)).sum())
