import numpy as np
import pytest

from snpekit import autodiff as ad
from snpekit.distributions import (
    BoxUniform,
    DiagonalGaussian,
    GaussianMixture,
    kl_diag_gaussians,
)
from snpekit.errors import AllZeroWeights, DegenerateProposal
from snpekit.features import FeatureVector
from snpekit.mdn import BayesianMdn, MdnSpec, TrainingBatch, mdn_log_loss, svi_loss
from snpekit.snpe import (
    SNPE,
    CalibrationKernel,
    SnpeConfig,
    child_seed,
    importance_weight,
    normalize_weights,
)


class LinearGaussianSimulator:
    """x = theta + noise; the conjugate posterior is known in closed form."""

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


# -- importance weights -------------------------------------------------------


def test_weight_is_one_when_proposal_is_prior():
    prior = BoxUniform([-10.0], [10.0])
    w = importance_weight(prior, prior, np.array([[0.0], [3.0], [-9.0]]))
    np.testing.assert_allclose(w, 1.0)


def test_weight_matches_density_arithmetic():
    prior = BoxUniform([-10.0], [10.0])
    proposal = GaussianMixture.single([0.0], [[1.0]])
    w = importance_weight(prior, proposal, [0.0])
    assert w == pytest.approx((1 / 20) / 0.3989422804014327, rel=1e-6)


def test_weight_zero_outside_prior_support():
    prior = BoxUniform([-10.0], [10.0])
    proposal = GaussianMixture.single([10.0], [[4.0]])
    assert importance_weight(prior, proposal, [11.0]) == 0.0


def test_degenerate_proposal_detected():
    prior = BoxUniform([-10.0], [10.0])
    proposal = BoxUniform([0.0], [1.0])
    with pytest.raises(DegenerateProposal):
        importance_weight(prior, proposal, [5.0])


def test_normalize_weights():
    np.testing.assert_allclose(normalize_weights([2.0, 2.0, 2.0]), [1, 1, 1])
    np.testing.assert_allclose(normalize_weights([0.0, 1.0, 3.0]), [0, 0.75, 2.25])
    with pytest.raises(AllZeroWeights):
        normalize_weights(np.zeros(4))


# -- calibration kernel ---------------------------------------------------------


def test_kernel_is_one_at_observation_and_zero_on_bad():
    x = np.array([[0.1, 0.2], [0.1, 0.2]])
    mask = np.zeros((2, 2))
    x_o = np.array([0.1, 0.2])
    for kind in ("bad-sim", "gaussian"):
        k = CalibrationKernel(kind=kind, bandwidth=0.7)
        vals = k.values(x, mask, np.array([0.0, 1.0]), x_o, np.zeros(2))
        assert vals[0] == 1.0  # K(x_o, x_o) = 1
        assert vals[1] == 0.0  # bad simulations annihilated


def test_gaussian_kernel_decreases_with_distance():
    k = CalibrationKernel(kind="gaussian", bandwidth=1.0)
    x = np.array([[0.0], [1.0], [2.0]])
    vals = k.values(x, np.zeros((3, 1)), np.zeros(3), np.array([0.0]), np.zeros(1))
    assert np.all(np.diff(vals) < 0)
    assert np.all((vals >= 0) & (vals <= 1))


# -- loss equivalences -----------------------------------------------------------


def test_snpe_loss_collapses_to_mle_when_uncertainty_pinned():
    spec = MdnSpec(n_inputs=2, theta_dim=1, n_components=2, hidden=(6,))
    bnet = BayesianMdn.create(spec, np.random.default_rng(0))
    W = bnet.n_weights
    values = bnet.params.values.copy()
    values[W : 2 * W] = np.log(1e-12)  # phi_s pinned near zero
    bnet = BayesianMdn(spec, bnet.params.with_values(values))

    rng = np.random.default_rng(1)
    theta = rng.standard_normal((5, 1))
    x = rng.standard_normal((5, 2))
    mask = np.zeros((5, 2))
    ones = np.ones(5)

    bayes = svi_loss(
        bnet, theta, x, mask, ones, ones,
        prior=bnet.weight_posterior(), n_total=5, rng=0,
    )
    point = mdn_log_loss(
        bnet.point_network(), bnet.point_network().params.values,
        theta, x, mask, ones, ones,
    )
    assert abs(bayes - float(point.value)) < 1e-8


def test_svi_loss_with_zero_kernel_is_kl_only():
    spec = MdnSpec(n_inputs=2, theta_dim=1, n_components=1, hidden=(4,))
    bnet = BayesianMdn.create(spec, np.random.default_rng(2))
    prior = DiagonalGaussian(
        mean=np.zeros(bnet.n_weights), std=np.full(bnet.n_weights, 10.0)
    )
    theta = np.zeros((4, 1))
    x = np.zeros((4, 2))
    loss = svi_loss(
        bnet, theta, x, np.zeros((4, 2)), np.ones(4), np.zeros(4),
        prior=prior, n_total=4, rng=0,
    )
    expected = kl_diag_gaussians(bnet.weight_posterior(), prior) / 4.0
    assert loss == pytest.approx(expected, rel=1e-10)


def test_kl_penalty_monotone_in_mean_change():
    rng = np.random.default_rng(3)
    prior = DiagonalGaussian(rng.standard_normal(6), np.exp(rng.standard_normal(6)))
    base_mean = rng.standard_normal(6)
    std = np.exp(0.2 * rng.standard_normal(6))
    for coord in range(6):
        last = -np.inf
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0]:
            mean = base_mean.copy()
            mean[coord] = prior.mean[coord] + scale * (
                base_mean[coord] - prior.mean[coord]
            )
            val = kl_diag_gaussians(DiagonalGaussian(mean, std), prior)
            assert val >= last - 1e-12
            last = val


# -- the loop ---------------------------------------------------------------------


def smoke_config(**kw):
    base = dict(
        n_rounds=2,
        n_per_round=500,
        components=1,
        hidden=(16,),
        epochs=250,
        batch_size=100,
        continuity_start_round=2,
    )
    base.update(kw)
    return SnpeConfig(**base)


@pytest.fixture(scope="module")
def fitted_snpe():
    prior = GaussianMixture.single([0.0], [[1.0]], dim_names=("theta",))
    est = SNPE(
        LinearGaussianSimulator(0.5),
        prior,
        RawFeaturizer(),
        config=smoke_config(),
        seed=7,
        theta_names=("theta",),
    )
    return est.fit(np.array([0.8]))


def test_loop_recovers_conjugate_posterior(fitted_snpe):
    # smoke-scale bound; the strict 0.1 sigma consistency check runs at
    # N=10^4 in the acceptance suite
    post = fitted_snpe.posterior_
    prec = 1.0 + 1.0 / 0.25
    true_mean = (0.8 / 0.25) / prec
    true_sd = np.sqrt(1.0 / prec)
    assert abs(post.mean()[0] - true_mean) < 0.2 * true_sd
    assert abs(post.covariance()[0, 0] / true_sd**2 - 1.0) < 0.3


def test_proposal_chaining_is_exact(fitted_snpe):
    # round r+1's proposal equals the serialised round-r posterior
    since = fitted_snpe.proposals_used_[1]
    written = fitted_snpe.posteriors_[0]
    np.testing.assert_array_equal(since.means, written.means)
    np.testing.assert_array_equal(since.chols, written.chols)
    assert since.to_json() == written.to_json()


def test_run_is_deterministic_under_seed():
    prior = GaussianMixture.single([0.0], [[1.0]])
    kw = dict(config=smoke_config(n_rounds=1, epochs=20), seed=11)
    a = SNPE(LinearGaussianSimulator(), prior, RawFeaturizer(), **kw).fit([0.5])
    b = SNPE(LinearGaussianSimulator(), prior, RawFeaturizer(), **kw).fit([0.5])
    assert a.posterior_.to_json() == b.posterior_.to_json()


def test_workers_do_not_change_output():
    prior = GaussianMixture.single([0.0], [[1.0]])
    kw = dict(config=smoke_config(n_rounds=1, epochs=10, sim_chunk=50), seed=13)
    a = SNPE(LinearGaussianSimulator(), prior, RawFeaturizer(), workers=1, **kw).fit([0.5])
    b = SNPE(LinearGaussianSimulator(), prior, RawFeaturizer(), workers=2, **kw).fit([0.5])
    assert a.posterior_.to_json() == b.posterior_.to_json()


def test_round_one_with_prior_proposal_has_unit_weights(fitted_snpe):
    diag = fitted_snpe.diagnostics_[0]
    assert diag["importance_weights"]["mean"] == pytest.approx(1.0)
    assert diag["importance_weights"]["max"] == pytest.approx(1.0)


def test_component_growth_mid_run():
    prior = GaussianMixture.single([0.0], [[1.0]])
    est = SNPE(
        LinearGaussianSimulator(),
        prior,
        RawFeaturizer(),
        config=smoke_config(n_rounds=2, components=(1, 2), epochs=20),
        seed=17,
    ).fit([0.3])
    assert est.posteriors_[0].n_components == 1
    assert est.posteriors_[1].n_components == 2
    # growth resets the continuity prior for that round
    assert est.diagnostics_[1]["weight_prior_chained"] is False


def test_child_seed_is_order_independent():
    a = child_seed(5, 1, 2).generate_state(4)
    b = child_seed(5, 1, 2).generate_state(4)
    c = child_seed(5, 2, 1).generate_state(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
