"""Probability distributions used throughout the toolkit.

Gaussian mixtures double as posterior models, proposal priors, and analytic
oracles; box uniforms are the only non-Gaussian priors. Covariances are held
as lower-triangular Cholesky factors everywhere, and log-densities go through
log-sum-exp, so evaluation stays stable for sharp components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonPositivePrecision

__all__ = [
    "GaussianMixture",
    "BoxUniform",
    "DiagonalGaussian",
    "kl_diag_gaussians",
    "divide_gaussian",
    "analytic_gm_posterior",
    "trapezoid_normalize",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of full-covariance Gaussians over a d-dimensional space.

    weights: (K,) simplex
    means:   (K, d)
    chols:   (K, d, d) lower-triangular Cholesky factors of the covariances
    """

    weights: np.ndarray
    means: np.ndarray
    chols: np.ndarray
    dim_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        chols = np.asarray(self.chols, dtype=np.float64)
        if chols.ndim == 2:
            chols = chols[None]
        object.__setattr__(self, "chols", chols)
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ValueError("mixture weights must form a simplex")
        if np.any(np.diagonal(self.chols, axis1=-2, axis2=-1) <= 0):
            raise ValueError("Cholesky factors need a positive diagonal")
        if not (len(self.weights) == len(self.means) == len(self.chols)):
            raise ValueError("inconsistent component counts")

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def single(cls, mean, cov, dim_names=None):
        """One-component mixture from a dense covariance matrix."""
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        return cls(
            weights=np.ones(1),
            means=mean[None],
            chols=np.linalg.cholesky(cov)[None],
            dim_names=dim_names,
        )

    def component_covariances(self):
        return np.einsum("kij,klj->kil", self.chols, self.chols)

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        """Full mixture covariance (law of total variance)."""
        mu = self.mean()
        cov = np.zeros((self.dim, self.dim))
        for w, m, s in zip(self.weights, self.means, self.component_covariances()):
            diff = m - mu
            cov += w * (s + np.outer(diff, diff))
        return cov

    def marginal_std(self):
        return np.sqrt(np.diag(self.covariance()))

    def _component_log_pdfs(self, points):
        points = np.atleast_2d(points)
        if points.shape[1] != self.dim:
            raise DimensionMismatch(
                f"points have dim {points.shape[1]}, mixture has dim {self.dim}"
            )
        out = np.empty((points.shape[0], self.n_components))
        for k in range(self.n_components):
            L = self.chols[k]
            diff = points - self.means[k]
            z = solve_triangular(L, diff.T, lower=True).T
            logdet = np.log(np.diag(L)).sum()
            out[:, k] = -0.5 * (z * z).sum(axis=1) - logdet - 0.5 * self.dim * _LOG_2PI
        return out

    def log_pdf(self, points):
        """Log-density at one point (scalar out) or a batch (vector out)."""
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim <= 1
        comp = self._component_log_pdfs(np.atleast_2d(points))
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        mix = comp + logw
        m = np.max(mix, axis=1, keepdims=True)
        out = (m + np.log(np.exp(mix - m).sum(axis=1, keepdims=True)))[:, 0]
        return float(out[0]) if single else out

    def pdf(self, points):
        return np.exp(self.log_pdf(points))

    def sample(self, n, rng):
        """n i.i.d. draws; deterministic for a given Generator state."""
        if n < 1:
            raise ValueError("n must be >= 1")
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        out = np.empty((n, self.dim))
        for k in range(self.n_components):
            idx = ks == k
            if idx.any():
                out[idx] = self.means[k] + z[idx] @ self.chols[k].T
        return out

    def marginal(self, dims):
        """Mixture restricted to a subset of coordinates."""
        dims = list(dims)
        covs = self.component_covariances()[np.ix_(range(self.n_components), dims, dims)]
        return GaussianMixture(
            weights=self.weights.copy(),
            means=self.means[:, dims],
            chols=np.linalg.cholesky(covs),
            dim_names=tuple(self.dim_names[i] for i in dims) if self.dim_names else None,
        )

    def affine(self, shift, scale):
        """Distribution of shift + scale * x (componentwise scale vector)."""
        shift = np.asarray(shift, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        return GaussianMixture(
            weights=self.weights.copy(),
            means=shift + self.means * scale,
            chols=self.chols * scale[None, :, None],
            dim_names=self.dim_names,
        )

    def to_json(self):
        payload = {
            "kind": "gaussian_mixture",
            "dim_names": list(self.dim_names) if self.dim_names else None,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "chols": self.chols.tolist(),
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        if payload.get("kind") != "gaussian_mixture":
            raise ValueError("not a gaussian_mixture document")
        names = payload.get("dim_names")
        return cls(
            weights=np.array(payload["weights"]),
            means=np.array(payload["means"]),
            chols=np.array(payload["chols"]),
            dim_names=tuple(names) if names else None,
        )


@dataclass(frozen=True)
class BoxUniform:
    """Uniform distribution on an axis-aligned box."""

    lower: np.ndarray
    upper: np.ndarray
    dim_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=np.float64)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=np.float64)))
        if self.lower.shape != self.upper.shape or np.any(self.lower >= self.upper):
            raise ValueError("box requires lower < upper componentwise")

    @property
    def dim(self):
        return self.lower.size

    def mean(self):
        return 0.5 * (self.lower + self.upper)

    def marginal_std(self):
        return (self.upper - self.lower) / np.sqrt(12.0)

    def log_pdf(self, points):
        points = np.asarray(points, dtype=np.float64)
        single = points.ndim <= 1
        pts = np.atleast_2d(points)
        if pts.shape[1] != self.dim:
            raise DimensionMismatch(
                f"points have dim {pts.shape[1]}, box has dim {self.dim}"
            )
        inside = np.all((pts >= self.lower) & (pts <= self.upper), axis=1)
        log_vol = np.log(self.upper - self.lower).sum()
        out = np.where(inside, -log_vol, -np.inf)
        return float(out[0]) if single else out

    def sample(self, n, rng):
        if n < 1:
            raise ValueError("n must be >= 1")
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


@dataclass(frozen=True)
class DiagonalGaussian:
    """Independent Gaussians per coordinate (mean, std); the weight posterior."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape:
            raise DimensionMismatch("mean and std shapes differ")
        if np.any(self.std <= 0):
            raise ValueError("std must be positive elementwise")

    @property
    def dim(self):
        return self.mean.size

    def log_pdf(self, points):
        points = np.asarray(points, dtype=np.float64)
        z = (points - self.mean) / self.std
        return -0.5 * (z * z).sum(axis=-1) - np.log(self.std).sum() - 0.5 * self.dim * _LOG_2PI

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.dim))


def kl_diag_gaussians(q_new, q_old):
    """KL(q_new || q_old) between diagonal Gaussians, in nats.

    This is the round-to-round continuity penalty: the old distribution's
    precision weights the squared change in means, so coordinates that earlier
    rounds pinned down resist movement.
    """
    if q_new.dim != q_old.dim:
        raise DimensionMismatch("distributions have different dimension")
    var_ratio = (q_new.std / q_old.std) ** 2
    mean_term = ((q_new.mean - q_old.mean) / q_old.std) ** 2
    return float(0.5 * (var_ratio + mean_term - 1.0 - np.log(var_ratio)).sum())


def divide_gaussian(numerator, denominator, prior=None):
    """Correct a learned Gaussian by dividing out a Gaussian proposal.

    numerator may be a single-component GaussianMixture or (mean, cov) pair;
    denominator likewise. The result has precision L_num - L_den (+ L_prior
    when the prior is Gaussian; a box prior acts as improper flat inside its
    bounds). Raises NonPositivePrecision when the combined precision is not
    positive definite, which is this correction's documented failure mode and
    must surface to the caller rather than being clamped.
    """
    mu_n, cov_n = _as_mean_cov(numerator)
    prec = np.linalg.inv(cov_n)
    eta = prec @ mu_n
    if denominator is not None and not isinstance(denominator, BoxUniform):
        mu_d, cov_d = _as_mean_cov(denominator)
        prec_d = np.linalg.inv(cov_d)
        prec = prec - prec_d
        eta = eta - prec_d @ mu_d
    if prior is not None and not isinstance(prior, BoxUniform):
        mu_p, cov_p = _as_mean_cov(prior)
        prec_p = np.linalg.inv(cov_p)
        prec = prec + prec_p
        eta = eta + prec_p @ mu_p
    prec = 0.5 * (prec + prec.T)
    try:
        np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NonPositivePrecision(
            "corrected precision is not positive definite (proposal sharper "
            "than the learned conditional)"
        ) from None
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ eta
    names = numerator.dim_names if isinstance(numerator, GaussianMixture) else None
    return GaussianMixture.single(mean, cov, dim_names=names)


def _as_mean_cov(dist):
    if isinstance(dist, GaussianMixture):
        if dist.n_components != 1:
            raise ValueError("need a single-component Gaussian")
        L = dist.chols[0]
        return dist.means[0], L @ L.T
    mean, cov = dist
    return (
        np.atleast_1d(np.asarray(mean, dtype=np.float64)),
        np.atleast_2d(np.asarray(cov, dtype=np.float64)),
    )


def trapezoid_normalize(grid, density):
    """Normalise a nonnegative grid function to integrate to 1 (trapezoid)."""
    z = np.trapezoid(density, grid)
    if z <= 0:
        raise ValueError("density integrates to zero")
    return density / z


def analytic_gm_posterior(alpha, sigma1, sigma2, prior, x_o, grid=None, n_grid=4001):
    """Ground-truth posterior grid for the common-mean two-Gaussian simulator.

    The likelihood of one observation is alpha*N(x_o; theta, sigma1^2) +
    (1-alpha)*N(x_o; theta, sigma2^2); under a box prior the posterior is that
    likelihood truncated to the box and normalised. Returns (grid, density).
    """
    if grid is None:
        grid = np.linspace(float(prior.lower[0]), float(prior.upper[0]), n_grid)
    grid = np.asarray(grid, dtype=np.float64)

    def normal_pdf(x, mu, sd):
        return np.exp(-0.5 * ((x - mu) / sd) ** 2) / (sd * np.sqrt(2.0 * np.pi))

    lik = alpha * normal_pdf(x_o, grid, sigma1) + (1.0 - alpha) * normal_pdf(
        x_o, grid, sigma2
    )
    inside = (grid >= prior.lower[0]) & (grid <= prior.upper[0])
    density = np.where(inside, lik, 0.0)
    return grid, trapezoid_normalize(grid, density)
