import numpy as np
import pytest
from scipy import stats

from snpekit.baselines import (
    adaptive_metropolis,
    glm_smoothness_prior,
    pilot_standardizer,
    rejection_abc,
    smc_abc,
    split_rhat,
)
from snpekit.distributions import GaussianMixture
from snpekit.errors import NoAcceptances, NonConvergence, SingularF
from snpekit.features import FeatureVector


class LinearGaussianSimulator:
    def __init__(self, noise_sd=0.5):
        self.noise_sd = noise_sd

    def simulate(self, theta, seed):
        rng = np.random.default_rng(seed)
        return np.atleast_1d(theta) + self.noise_sd * rng.standard_normal(1)

    def simulate_batch(self, thetas, seeds):
        return [self.simulate(t, s) for t, s in zip(thetas, seeds)]


class RawFeaturizer:
    kind = "raw"

    def __call__(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        return FeatureVector(x, np.zeros(x.size))


PRIOR = GaussianMixture.single([0.0], [[1.0]])
SIM = LinearGaussianSimulator(0.5)
FEAT = RawFeaturizer()
X_O = FeatureVector(np.array([0.8]), np.zeros(1))


def conjugate_posterior(x_o=0.8, noise_sd=0.5):
    prec = 1.0 + 1.0 / noise_sd**2
    return (x_o / noise_sd**2) / prec, np.sqrt(1.0 / prec)


# -- smoothness prior ----------------------------------------------------------


def test_smoothness_prior_is_spd():
    prior = glm_smoothness_prior(10, sigma=2.0)
    L = prior.chols[0]
    assert np.all(np.diag(L) > 0)  # Cholesky succeeded in the constructor


def test_smoothness_prior_prefers_smooth_draws():
    prior = glm_smoothness_prior(10, sigma=2.0)
    rng = np.random.default_rng(0)
    draws = prior.sample(1000, rng)
    marginal_sd = prior.marginal_std()
    white = rng.standard_normal((1000, 10)) * marginal_sd

    def mean_abs_second_diff(v):
        return np.abs(np.diff(v, n=2, axis=1)).mean()

    assert mean_abs_second_diff(draws) < 0.5 * mean_abs_second_diff(white)


def test_smoothness_prior_d3_hand_computed():
    sigma = 1.5
    ridge = 1.0
    prior = glm_smoothness_prior(3, sigma=sigma, ridge=ridge)
    F = np.array([[1.0, -2.0, 1.0]])
    expected = sigma**2 * np.linalg.inv(F.T @ F + ridge * np.eye(3))
    L = prior.chols[0]
    np.testing.assert_allclose(L @ L.T, expected, atol=1e-12)


def test_smoothness_prior_singular_without_ridge():
    with pytest.raises(SingularF):
        glm_smoothness_prior(10, ridge=0)


# -- rejection ABC ---------------------------------------------------------------


def test_rejection_abc_accepts_everything_at_huge_epsilon():
    thetas, info = rejection_abc(PRIOR, SIM, FEAT, X_O, epsilon=1e9, n=500, seed=0)
    assert info["acceptance_rate"] == 1.0
    # samples are prior draws
    assert stats.kstest(thetas[:, 0], "norm").pvalue > 0.01


def test_rejection_abc_zero_epsilon_rejects_everything():
    with pytest.raises(NoAcceptances):
        rejection_abc(PRIOR, SIM, FEAT, X_O, epsilon=1e-9, n=200, seed=1)


def test_rejection_abc_small_epsilon_matches_conjugate_mean():
    thetas, info = rejection_abc(
        PRIOR, SIM, FEAT, X_O, epsilon=0.15, n=20_000, seed=2
    )
    true_mean, true_sd = conjugate_posterior()
    se = thetas[:, 0].std() / np.sqrt(len(thetas))
    assert abs(thetas[:, 0].mean() - true_mean) < 3 * se + 0.02


def test_rejection_acceptance_monotone_in_epsilon():
    rates = []
    for eps in [2.0, 1.0, 0.5, 0.25]:
        _, info = rejection_abc(PRIOR, SIM, FEAT, X_O, epsilon=eps, n=2000, seed=3)
        rates.append(info["acceptance_rate"])
    assert all(a >= b for a, b in zip(rates, rates[1:]))


# -- SMC ABC ----------------------------------------------------------------------


def test_smc_schedule_value():
    assert 15 * 0.9**3 == pytest.approx(10.935)


def test_smc_abc_approximates_posterior_and_tracks_budget():
    state = smc_abc(
        PRIOR, SIM, FEAT, X_O, seed=4,
        n_particles=400, eps0=4.0, decay=0.8, budget=20_000,
    )
    assert state.n_simulations <= 20_000
    # weights stay a simplex with healthy ESS at every stage
    assert state.weights.sum() == pytest.approx(1.0)
    assert state.ess > 10
    true_mean, true_sd = conjugate_posterior()
    assert abs(state.mean()[0] - true_mean) < 0.15
    assert state.epsilon < 4.0 * 0.8  # advanced beyond the first stage


def test_single_stage_smc_equals_rejection_abc_distribution():
    # budget exhausted during stage 0 leaves a pure rejection sample
    state = smc_abc(
        PRIOR, SIM, FEAT, X_O, seed=5,
        n_particles=300, eps0=1.0, decay=0.9, budget=370,
    )
    assert state.stage == 0
    assert len(state.particles) > 100
    std, _ = pilot_standardizer(PRIOR, SIM, FEAT, 70, seed=99)
    ref, _ = rejection_abc(
        PRIOR, SIM, FEAT, X_O, epsilon=1.0, n=4000, seed=6, standardizer=std
    )
    assert stats.ks_2samp(state.particles[:, 0], ref[:, 0]).pvalue > 0.01


# -- adaptive Metropolis ------------------------------------------------------------


def gaussian_log_post(mean, cov):
    prec = np.linalg.inv(cov)

    def f(x):
        diff = np.atleast_2d(x) - mean
        return -0.5 * np.einsum("bi,ij,bj->b", diff, prec, diff)

    return f


def test_metropolis_matches_conjugate_gaussian():
    mean = np.array([1.0, -2.0])
    cov = np.array([[1.0, 0.6], [0.6, 1.5]])
    chain = adaptive_metropolis(
        gaussian_log_post(mean, cov), np.zeros(2), seed=0,
        warmup=1500, n_samples=4000,
    )
    assert 0.2 <= chain.acceptance_rate <= 0.4
    assert np.all(chain.rhat < 1.05)
    flat = chain.flat()
    se = flat.std(axis=0) / np.sqrt(len(flat) / 20)  # generous for autocorrelation
    assert np.all(np.abs(chain.mean() - mean) < 3 * se)
    np.testing.assert_allclose(np.cov(flat.T), cov, rtol=0.2, atol=0.1)


def test_metropolis_seeded_reproducibility():
    f = gaussian_log_post(np.zeros(2), np.eye(2))
    a = adaptive_metropolis(f, np.zeros(2), seed=7, warmup=500, n_samples=500)
    b = adaptive_metropolis(f, np.zeros(2), seed=7, warmup=500, n_samples=500)
    np.testing.assert_array_equal(a.samples, b.samples)
    c = adaptive_metropolis(f, np.zeros(2), seed=8, warmup=500, n_samples=500)
    se = a.flat().std(axis=0) / np.sqrt(a.flat().shape[0] / 20)
    assert np.all(np.abs(a.mean() - c.mean()) < 3 * se)


def test_nonconvergence_detected_on_pathological_target():
    # two separated narrow modes: chains settle on different ones, Rhat blows up
    mix = GaussianMixture(
        weights=[0.5, 0.5], means=[[-3.0], [3.0]], chols=[[[0.05]], [[0.05]]]
    )

    def f(x):
        return mix.log_pdf(np.atleast_2d(x))

    with pytest.raises(NonConvergence):
        adaptive_metropolis(f, np.zeros(1), seed=1, warmup=400, n_samples=400)


def test_split_rhat_near_one_for_iid():
    rng = np.random.default_rng(9)
    samples = rng.standard_normal((4, 1000, 3))
    assert np.all(split_rhat(samples) < 1.02)
