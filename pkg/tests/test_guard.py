import numpy as np
import pytest
from scipy import stats

from snpekit.distributions import BoxUniform
from snpekit.errors import ProposalStarvation
from snpekit.guard import GuardClassifier, effective_prior_report, guarded_propose


def boundary_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-2, 2, size=(n, 1))
    labels = (theta[:, 0] > 0).astype(float)
    return theta, labels


def test_one_class_collapse():
    rng = np.random.default_rng(1)
    theta = rng.uniform(-1, 1, size=(300, 2))
    guard = GuardClassifier(epochs=100, seed=0).fit(theta, np.zeros(300))
    assert guard.bad_probability(theta).mean() < 0.1
    assert not guard.ready  # only one class seen


def test_boundary_learned():
    theta, labels = boundary_data()
    guard = GuardClassifier(epochs=150, seed=0).fit(theta, labels)
    assert guard.ready
    probe = np.linspace(-2, 2, 81)[:, None]
    g = guard.bad_probability(probe)
    assert g[probe[:, 0] < -0.5].max() < 0.2
    assert g[probe[:, 0] > 0.5].min() > 0.8


def test_label_flip_symmetry():
    theta, labels = boundary_data(seed=2)
    a = GuardClassifier(epochs=150, seed=0).fit(theta, labels)
    b = GuardClassifier(epochs=150, seed=0).fit(theta, 1.0 - labels)
    probe = np.linspace(-1.8, 1.8, 41)[:, None]
    np.testing.assert_allclose(
        a.bad_probability(probe), 1.0 - b.bad_probability(probe), atol=0.05
    )


def test_buffer_accumulates_across_updates():
    theta, labels = boundary_data(seed=3)
    guard = GuardClassifier(epochs=50, seed=0)
    guard.update(theta[:200], labels[:200])
    guard.update(theta[200:], labels[200:])
    assert len(guard.buffer_label_) == 400


def test_fresh_guard_accepts_everything():
    prior = BoxUniform([-1.0], [1.0])
    guard = GuardClassifier()
    thetas, rejected = guarded_propose(prior, guard, 100, np.random.default_rng(0))
    assert len(thetas) == 100 and rejected == 0


def test_indicator_guard_restricts_distribution():
    # reject the positive half: accepted samples follow the restricted prior
    prior = BoxUniform([-1.0], [1.0])

    class HalfGuard:
        ready = True

        def bad_probability(self, t):
            return (np.atleast_2d(t)[:, 0] > 0).astype(float)

    thetas, _ = guarded_propose(prior, HalfGuard(), 10_000, np.random.default_rng(1))
    assert thetas.max() <= 0
    uniform = np.random.default_rng(2).uniform(-1, 0, 10_000)
    assert stats.ks_2samp(thetas[:, 0], uniform).pvalue > 0.01


def test_coin_guard_halves_acceptance():
    prior = BoxUniform([-1.0], [1.0])

    class CoinGuard:
        ready = True

        def bad_probability(self, t):
            return np.full(len(np.atleast_2d(t)), 0.5)

    thetas, rejected = guarded_propose(prior, CoinGuard(), 5000, np.random.default_rng(3))
    rate = 5000 / (5000 + rejected)
    assert abs(rate - 0.5) < 4 * 0.5 / np.sqrt(5000 + rejected)


def test_always_reject_starves():
    prior = BoxUniform([-1.0], [1.0])

    class WallGuard:
        ready = True

        def bad_probability(self, t):
            return np.ones(len(np.atleast_2d(t)))

    with pytest.raises(ProposalStarvation):
        guarded_propose(
            prior, WallGuard(), 1, np.random.default_rng(4),
            max_consecutive_rejections=1000,
        )


def test_effective_prior_report():
    prior = BoxUniform([-1.0], [1.0])
    grid = np.linspace(-0.9, 0.9, 19)[:, None]
    flat = effective_prior_report(prior, None, grid)
    np.testing.assert_allclose(flat, 0.5)

    theta, labels = boundary_data(seed=5)
    guard = GuardClassifier(epochs=150, seed=0).fit(theta, labels)
    report = effective_prior_report(prior, guard, grid)
    assert report[grid[:, 0] > 0.5].max() < 0.2 * report[grid[:, 0] < -0.5].min()


def test_guard_checkpoint_roundtrip(tmp_path):
    theta, labels = boundary_data(seed=6)
    guard = GuardClassifier(epochs=60, seed=0).fit(theta, labels)
    path = tmp_path / "guard.snpk"
    guard.save(path)
    back = GuardClassifier.load(path)
    probe = np.linspace(-1, 1, 11)[:, None]
    np.testing.assert_allclose(
        back.bad_probability(probe), guard.bad_probability(probe), atol=1e-12
    )
