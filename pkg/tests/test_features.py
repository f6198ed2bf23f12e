import numpy as np
import pytest

from snpekit import autodiff as ad
from snpekit.features import (
    FeatureStandardizer,
    FeatureVector,
    GruFeaturizer,
    autapse_features,
    glm_features,
    gm_features,
    gru_forward,
    hh_features,
    spike_times,
)
from snpekit.mdn import BayesianMdn, MdnSpec, MixtureDensityNetwork, TrainingBatch
from snpekit.optim import finite_difference_gradient, value_and_grad
from snpekit.simulators import (
    BernoulliGlmSimulator,
    GlmSpec,
    HhSpec,
    HodgkinHuxleySimulator,
    Trace,
)
from snpekit.simulators.hh import theta_star_log


def make_trace(v, dt=0.025, bad=False):
    v = np.asarray(v, dtype=np.float64)
    return Trace(dt=dt, channels={"V": v}, stimulus=np.zeros(v.size), bad=bad)


def test_constant_trace_degenerate_features():
    fv = hh_features(make_trace(np.full(8000, -70.0)), onset=60.0)
    assert fv.values[0] == 0  # spikes
    assert fv.values[1] == -70.0  # resting potential
    assert np.all(fv.mask[2:12] == 1)  # autocorrelations undefined
    assert fv.values[12] == -70.0 and fv.values[13] == 0.0  # mean, variance
    assert np.all(fv.mask[14:20] == 1)  # standardised moments undefined
    assert np.all(np.isnan(fv.values[fv.mask > 0]))  # sentinel, never read


def test_synthetic_spike_waveform_counted():
    dt = 0.025
    v = np.full(9600, -70.0)
    for start in (1000, 3000, 5000):  # 3 crossings, 50 ms apart
        v[start : start + 40] = 20.0
    fv = hh_features(make_trace(v, dt))
    assert fv.values[0] == 3


def test_refractory_window_merges_crossings():
    dt = 0.025
    v = np.full(4000, -70.0)
    v[1000:1010] = 10.0
    v[1030:1040] = 10.0  # second crossing 0.75 ms later: inside refractory
    assert len(spike_times(v, dt)) == 1


def test_latency_masked_without_spikes():
    quiet = hh_features(make_trace(np.full(9600, -65.0)), include_latency=True)
    assert quiet.mask[-1] == 1.0
    v = np.full(9600, -65.0)
    v[4000:4040] = 30.0  # spike at 100 ms
    spiking = hh_features(make_trace(v), onset=60.0, include_latency=True)
    assert spiking.mask[-1] == 0.0
    assert spiking.values[-1] == pytest.approx(40.0, abs=0.1)


def test_bad_trace_masks_everything():
    fv = hh_features(make_trace(np.full(100, np.nan), bad=True))
    assert fv.bad and np.all(fv.mask == 1)


def test_hh_features_stable_under_dt_halving():
    theta = theta_star_log().copy()
    theta[8] = np.log(1e-12)
    coarse = HodgkinHuxleySimulator(HhSpec()).simulate(theta, 0)
    fine = HodgkinHuxleySimulator(HhSpec(dt=0.0125)).simulate(theta, 0)
    a, b = hh_features(coarse), hh_features(fine)
    np.testing.assert_array_equal(a.mask, b.mask)
    keep = a.mask == 0
    # relative change under 2%, with a unit floor for near-zero features
    denom = np.maximum(np.abs(a.values[keep]), 1.0)
    assert np.max(np.abs(a.values[keep] - b.values[keep]) / denom) < 0.02


def test_glm_features_zero_and_saturated():
    sim = BernoulliGlmSimulator(GlmSpec(n_bins=500))
    zero = glm_features(np.zeros(500), sim.design)
    np.testing.assert_array_equal(zero.values, np.zeros(10))
    ones = glm_features(np.ones(500), sim.design)
    np.testing.assert_allclose(ones.values, sim.design.mean(axis=0))


def test_glm_features_match_expectation():
    spec = GlmSpec(n_bins=300)
    sim = BernoulliGlmSimulator(spec)
    rng = np.random.default_rng(3)
    beta = 0.4 * rng.standard_normal(10)
    p = sim.spike_probabilities(beta)
    expected = sim.design.T @ p / spec.n_bins
    reps = np.stack(
        [glm_features(sim.simulate(beta, s), sim.design).values for s in range(1000)]
    )
    se = reps.std(axis=0) / np.sqrt(len(reps))
    assert np.all(np.abs(reps.mean(axis=0) - expected) < 4 * se + 1e-12)


def test_gm_features_of_standard_normal():
    draws = np.random.default_rng(4).standard_normal(10_000)
    fv = gm_features(draws)
    assert abs(fv.values[0]) < 0.04
    assert abs(fv.values[1]) < 0.05
    assert np.all(fv.mask == 0)


def test_gm_features_single_draw_mask_variance():
    fv = gm_features(np.array([1.3]))
    assert fv.mask[1] == 1.0
    assert fv.values[0] == 1.3
    np.testing.assert_array_equal(fv.values[2:], np.full(9, 1.3))


def test_autapse_features():
    tr = Trace(dt=0.1, channels={"r": np.full(50, 3.0)}, stimulus=np.zeros(50))
    assert autapse_features(tr).values[0] == 3.0
    bad = Trace(
        dt=0.1, channels={"r": np.full(5, np.inf)}, stimulus=np.zeros(5), bad=True
    )
    fv = autapse_features(bad)
    assert fv.bad and fv.mask[0] == 1


def test_feature_standardizer_ignores_masked_and_freezes():
    values = np.array([[1.0, 10.0], [3.0, -99.0], [5.0, 20.0]])
    mask = np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    std = FeatureStandardizer().fit(values, mask)
    assert std.mean[0] == pytest.approx(3.0)
    assert std.mean[1] == pytest.approx(15.0)  # -99 is masked out
    z = std.transform(np.array([3.0, 15.0]))
    np.testing.assert_allclose(z, [0.0, 0.0], atol=1e-12)


# -- recurrent featurizer -------------------------------------------------------


GRU_SPEC = MdnSpec(
    n_inputs=2, theta_dim=2, n_components=1, hidden=(6,), frontend="gru", gru_units=4
)


def test_gru_zero_weights_zero_input_is_fixed_point():
    net = MixtureDensityNetwork.create(GRU_SPEC, np.random.default_rng(0))
    zero = net.params.with_values(np.zeros(net.params.size))
    seq = np.zeros((30, 2))
    h = gru_forward(GRU_SPEC, zero.values, zero.layout, seq)
    np.testing.assert_array_equal(h.value, np.zeros((1, 4)))


def test_gru_forward_deterministic():
    net = MixtureDensityNetwork.create(GRU_SPEC, np.random.default_rng(1))
    seq = np.random.default_rng(2).standard_normal((40, 2))
    a = gru_forward(GRU_SPEC, net.params.values, net.params.layout, seq)
    b = gru_forward(GRU_SPEC, net.params.values, net.params.layout, seq)
    np.testing.assert_array_equal(a.value, b.value)


def test_gru_bptt_gradient_matches_finite_differences():
    # 50-step random sequence through the full recurrent mixture network
    net = MixtureDensityNetwork.create(GRU_SPEC, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    batch = TrainingBatch(
        theta=rng.standard_normal((2, 2)),
        x=rng.standard_normal((2, 50, 2)),
    )

    class M:
        def loss(self, values, b, r):
            return net.loss(values, batch, r)

    report = value_and_grad(M(), net.params, None, 0)
    fd = finite_difference_gradient(M(), net.params, None, 0, step=1e-5)
    big = np.abs(report.grad) > 1e-6
    rel = np.abs(report.grad[big] - fd[big]) / np.abs(report.grad[big])
    assert rel.max() < 1e-3


def test_bayesian_gru_gradient_matches_finite_differences():
    bnet = BayesianMdn.create(GRU_SPEC, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    batch = TrainingBatch(
        theta=rng.standard_normal((2, 2)),
        x=rng.standard_normal((2, 20, 2)),
    )

    class M:
        def loss(self, values, b, r):
            return bnet.loss(values, batch, r)

    report = value_and_grad(M(), bnet.params, None, 3)
    fd = finite_difference_gradient(M(), bnet.params, None, 3, step=1e-5)
    big = np.abs(report.grad) > 1e-6
    rel = np.abs(report.grad[big] - fd[big]) / np.abs(report.grad[big])
    assert rel.max() < 1e-3


def test_gru_featurizer_prepares_standardised_sequences():
    v = np.full(400, -70.0)
    stim = np.zeros(400)
    stim[100:300] = 2.0
    tr = Trace(dt=0.025, channels={"V": v}, stimulus=stim)
    feat = GruFeaturizer(stride=10, stim_scale=2.0)
    fv = feat(tr)
    seq = feat.sequence(fv)
    assert seq.shape == (40, 2)
    np.testing.assert_allclose(seq[:, 0], 0.0)  # voltage at rest
    assert seq[:, 1].max() == pytest.approx(1.0)
