"""Reference and comparison methods: rejection ABC, sequential Monte-Carlo
ABC with a decreasing tolerance schedule, and an adaptive random-walk
Metropolis sampler for models with tractable likelihoods (the GLM reference).

Distances are Euclidean on features z-scored by prior-predictive pilot runs;
every simulation, pilot included, counts against the stated budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import GaussianMixture
from .errors import NoAcceptances, NonConvergence, ParticleCollapse, SingularF
from .features import FeatureStandardizer
from .snpe import child_seed, simulate_and_featurize

__all__ = [
    "glm_smoothness_prior",
    "pilot_standardizer",
    "rejection_abc",
    "SmcState",
    "smc_abc",
    "McmcChain",
    "adaptive_metropolis",
    "split_rhat",
]


def glm_smoothness_prior(d=10, sigma=2.0, ridge=0.3):
    """Zero-mean Gaussian whose precision penalises second differences.

    F stacks the rows theta_{j-1} - 2 theta_j + theta_{j+1}; it is rank
    deficient by two (constant and linear directions), so the precision is
    (F^T F + ridge I) / sigma^2. With ridge disabled the construction fails
    loudly instead of delivering an improper prior.
    """
    if d < 3:
        raise ValueError("need d >= 3 for second differences")
    F = np.zeros((d - 2, d))
    for j in range(d - 2):
        F[j, j : j + 3] = (1.0, -2.0, 1.0)
    FtF = F.T @ F
    if ridge == 0:
        raise SingularF("F^T F is rank deficient by 2; enable the ridge")
    precision = (FtF + ridge * np.eye(d)) / sigma**2
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    return GaussianMixture.single(np.zeros(d), cov)


def pilot_standardizer(prior, simulator, featurizer, n_pilot, seed, chunk=200):
    """Feature z-scoring fitted on prior-predictive pilot simulations."""
    rng = np.random.default_rng(child_seed(seed, 900))
    thetas = prior.sample(n_pilot, rng)
    seeds = [child_seed(seed, 901, i) for i in range(n_pilot)]
    values, masks, bads = simulate_and_featurize(
        simulator, featurizer, thetas, seeds, chunk=chunk
    )
    good = bads == 0
    std = FeatureStandardizer().fit(values[good], masks[good])
    return std, n_pilot


def _distances(values, masks, bads, x_o_fv, standardizer):
    z = standardizer.transform(np.where(masks > 0, 0.0, values))
    z_o = standardizer.transform(
        np.where(x_o_fv.mask > 0, 0.0, x_o_fv.values)
    )
    both = (masks == 0) & (x_o_fv.mask == 0)[None, :]
    diff = np.where(both, z - z_o[None, :], 0.0)
    d = np.sqrt((diff * diff).sum(axis=1))
    return np.where(bads > 0, np.inf, d)


def rejection_abc(
    prior, simulator, featurizer, x_o_fv, epsilon, n, seed,
    standardizer=None, chunk=200, workers=1,
):
    """Draw n from the prior and keep samples within epsilon of the data.

    Returns (accepted thetas, info dict). Raises NoAcceptances when the
    tolerance admits nothing.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n_sims = 0
    if standardizer is None:
        standardizer, n_sims = pilot_standardizer(
            prior, simulator, featurizer, min(200, n), seed
        )
    rng = np.random.default_rng(child_seed(seed, 910))
    thetas = prior.sample(n, rng)
    seeds = [child_seed(seed, 911, i) for i in range(n)]
    values, masks, bads = simulate_and_featurize(
        simulator, featurizer, thetas, seeds, chunk=chunk, workers=workers
    )
    n_sims += n
    dist = _distances(values, masks, bads, x_o_fv, standardizer)
    keep = dist <= epsilon
    if not keep.any():
        raise NoAcceptances(f"nothing within epsilon={epsilon}")
    return thetas[keep], {
        "acceptance_rate": float(keep.mean()),
        "n_simulations": n_sims,
        "distances": dist[keep],
    }


@dataclass
class SmcState:
    """Particle population at one tolerance stage."""

    particles: np.ndarray
    weights: np.ndarray
    epsilon: float
    stage: int
    n_simulations: int
    history: list = field(default_factory=list)

    @property
    def ess(self):
        return float(1.0 / (self.weights**2).sum())

    def mean(self):
        return self.weights @ self.particles

    def covariance(self):
        mu = self.mean()
        diff = self.particles - mu
        return (self.weights[:, None] * diff).T @ diff

    def moment_matched(self, dim_names=None):
        return GaussianMixture.single(self.mean(), self.covariance(), dim_names=dim_names)


def smc_abc(
    prior, simulator, featurizer, x_o_fv, seed,
    n_particles=1000, eps0=15.0, decay=0.9, budget=25_000,
    min_acceptance=0.01, chunk=200, workers=1,
):
    """Tolerance-annealed ABC: resample, perturb, accept within epsilon_i.

    epsilon_i = eps0 * decay^i. The perturbation kernel is Gaussian with twice
    the weighted particle covariance; importance weights follow the standard
    prior-over-mixture form. Stops when the acceptance rate at the current
    tolerance drops below `min_acceptance` or the simulation budget is spent.
    """
    standardizer, n_sims = pilot_standardizer(
        prior, simulator, featurizer, min(200, budget // 10), seed
    )
    rng = np.random.default_rng(child_seed(seed, 920))

    def run_batch(thetas, offset):
        seeds = [child_seed(seed, 921, offset + i) for i in range(len(thetas))]
        values, masks, bads = simulate_and_featurize(
            simulator, featurizer, thetas, seeds, chunk=chunk, workers=workers
        )
        return _distances(values, masks, bads, x_o_fv, standardizer)

    # stage 0: rejection from the prior at eps0
    particles = np.zeros((0, prior.dim))
    epsilon = eps0
    draw_offset = 0
    history = []
    while len(particles) < n_particles and n_sims < budget:
        m = min(max(n_particles, 256), budget - n_sims)
        cand = prior.sample(m, rng)
        dist = run_batch(cand, draw_offset)
        draw_offset += m
        n_sims += m
        particles = np.vstack([particles, cand[dist <= epsilon]])
    if len(particles) < 2:
        raise ParticleCollapse("stage 0 failed to populate the particle set")
    particles = particles[:n_particles]
    weights = np.full(len(particles), 1.0 / len(particles))
    state = SmcState(particles, weights, epsilon, 0, n_sims, history)
    history.append(
        {"stage": 0, "epsilon": epsilon, "acceptance": 1.0, "ess": state.ess,
         "n_simulations": n_sims}
    )

    stage = 0
    while n_sims < budget:
        stage += 1
        epsilon = eps0 * decay**stage
        cov = 2.0 * state.covariance() + 1e-12 * np.eye(prior.dim)
        chol = np.linalg.cholesky(cov)
        new_particles = []
        new_logw = []
        accepted = 0
        proposed = 0
        while accepted < n_particles and n_sims < budget:
            m = min(max(n_particles - accepted, 256), budget - n_sims)
            anc = rng.choice(len(state.particles), size=m, p=state.weights)
            cand = state.particles[anc] + rng.standard_normal((m, prior.dim)) @ chol.T
            logp = np.atleast_1d(prior.log_pdf(cand))
            viable = ~np.isneginf(logp)
            cand = cand[viable]
            logp = logp[viable]
            proposed += m
            if len(cand) == 0:
                continue
            dist = run_batch(cand, draw_offset)
            draw_offset += len(cand)
            n_sims += len(cand)
            ok = dist <= epsilon
            for theta, lp in zip(cand[ok], logp[ok]):
                diff = (theta - state.particles) @ np.linalg.inv(chol).T
                log_k = -0.5 * (diff * diff).sum(axis=1)
                log_mix = np.log(state.weights) + log_k
                mmax = log_mix.max()
                new_logw.append(lp - (mmax + np.log(np.exp(log_mix - mmax).sum())))
                new_particles.append(theta)
            accepted = len(new_particles)
        if accepted == 0:
            break
        acceptance = accepted / max(proposed, 1)
        particles = np.array(new_particles[:n_particles])
        logw = np.array(new_logw[: len(particles)])
        logw -= logw.max()
        weights = np.exp(logw)
        weights /= weights.sum()
        state = SmcState(particles, weights, epsilon, stage, n_sims, history)
        if state.ess < 2:
            raise ParticleCollapse(f"ESS {state.ess:.2f} at stage {stage}")
        history.append(
            {"stage": stage, "epsilon": epsilon, "acceptance": acceptance,
             "ess": state.ess, "n_simulations": n_sims}
        )
        if acceptance < min_acceptance:
            break
    return state


@dataclass
class McmcChain:
    """Post-adaptation samples from all chains plus convergence diagnostics."""

    samples: np.ndarray  # (chains, n, d)
    log_posteriors: np.ndarray
    acceptance_rate: float
    step_scale: float
    rhat: np.ndarray

    def flat(self):
        return self.samples.reshape(-1, self.samples.shape[-1])

    def mean(self):
        return self.flat().mean(axis=0)

    def std(self):
        return self.flat().std(axis=0)


def split_rhat(samples):
    """Split-Rhat per dimension over (chains, n, d) samples."""
    c, n, d = samples.shape
    half = n // 2
    chains = samples[:, : 2 * half, :].reshape(2 * c, half, d)
    means = chains.mean(axis=1)
    variances = chains.var(axis=1, ddof=1)
    w = variances.mean(axis=0)
    b = half * means.var(axis=0, ddof=1)
    var_hat = (half - 1) / half * w + b / half
    return np.sqrt(var_hat / w)


def adaptive_metropolis(
    log_posterior, x0, seed, n_chains=4, warmup=2000, n_samples=5000,
    target_acceptance=0.3, rhat_tol=1.05,
):
    """Random-walk Metropolis with scale and covariance adaptation.

    `log_posterior` maps a (chains, d) batch to (chains,) log densities; all
    chains step in lockstep. Adaptation (Robbins-Monro on the log step scale,
    empirical covariance from the first warmup half) freezes before the
    returned samples are collected. Raises NonConvergence if split-Rhat
    exceeds `rhat_tol` on any dimension.
    """
    rng = np.random.default_rng(child_seed(seed, 930))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    d = x0.shape[1]
    x = x0 + 0.1 * rng.standard_normal((n_chains, d))
    lp = log_posterior(x)
    log_scale = np.log(2.38 / np.sqrt(d))
    chol = np.eye(d)

    def sweep(n_steps, adapt, collect=False, start_step=0):
        nonlocal x, lp, log_scale
        out = np.empty((n_chains, n_steps, d)) if collect else None
        out_lp = np.empty((n_chains, n_steps)) if collect else None
        n_accept = 0
        history = []
        for t in range(n_steps):
            step = np.exp(log_scale)
            prop = x + step * rng.standard_normal((n_chains, d)) @ chol.T
            lp_prop = log_posterior(prop)
            accept = np.log(rng.random(n_chains)) < lp_prop - lp
            x = np.where(accept[:, None], prop, x)
            lp = np.where(accept, lp_prop, lp)
            n_accept += accept.sum()
            if adapt:
                rate = accept.mean()
                log_scale += (rate - target_acceptance) / np.sqrt(start_step + t + 1)
                history.append(x.copy())
            if collect:
                out[:, t] = x
                out_lp[:, t] = lp
        return out, out_lp, n_accept / (n_steps * n_chains), history

    half = warmup // 2
    _, _, _, hist = sweep(half, adapt=True)
    pooled = np.concatenate(hist[half // 2 :], axis=0)
    cov = np.cov(pooled.T) + 1e-10 * np.eye(d)
    chol = np.linalg.cholesky(cov)
    log_scale = np.log(2.38 / np.sqrt(d))
    sweep(warmup - half, adapt=True, start_step=half)

    samples, log_posts, acceptance, _ = sweep(n_samples, adapt=False, collect=True)
    rhat = split_rhat(samples)
    if np.any(rhat >= rhat_tol):
        raise NonConvergence(f"split-Rhat {rhat.max():.3f} >= {rhat_tol}")
    return McmcChain(
        samples=samples,
        log_posteriors=log_posts,
        acceptance_rate=float(acceptance),
        step_scale=float(np.exp(log_scale)),
        rhat=rhat,
    )
