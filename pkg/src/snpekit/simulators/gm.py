"""Two-Gaussian mixture simulators: common-mean and mirrored-means variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GmSpec:
    """The common-mean variant draws from alpha*N(theta, sigma1^2) +
    (1-alpha)*N(theta, sigma2^2); the bimodal variant mirrors the second
    component's mean to -theta and uses sigma1 for both."""

    variant: str = "common-mean"
    alpha: float = 0.5
    sigma1: float = 1.0
    sigma2: float = 0.1
    n_samples: int = 50

    def __post_init__(self):
        if self.variant not in ("common-mean", "bimodal"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (0.0 <= self.alpha <= 1.0 and self.sigma1 > 0 and self.sigma2 > 0):
            raise ValueError("need alpha in [0,1] and positive sigmas")


class GaussianMixtureSimulator:
    theta_names = ("theta",)

    def __init__(self, spec):
        self.spec = spec

    def simulate(self, theta, seed):
        theta = float(np.atleast_1d(theta)[0])
        rng = np.random.default_rng(seed)
        spec = self.spec
        first = rng.random(spec.n_samples) < spec.alpha
        z = rng.standard_normal(spec.n_samples)
        if spec.variant == "common-mean":
            sd = np.where(first, spec.sigma1, spec.sigma2)
            return theta + sd * z
        mean = np.where(first, theta, -theta)
        return mean + spec.sigma1 * z

    def simulate_batch(self, thetas, seeds):
        return [self.simulate(t, s) for t, s in zip(thetas, seeds)]
