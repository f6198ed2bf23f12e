"""Classifier predicting which parameters break the simulator.

A small sigmoid-output network g: theta -> [0, 1] trains online on (theta,
bad-flag) pairs accumulated across rounds. Proposals are thinned by rejecting
theta with probability g(theta) before the expensive simulation runs. The
guard sees only parameters and flags, never features, so the thinning is
independent of the observation and acts as a modification of the prior: the
effective prior is prior(theta) * (1 - g(theta)), up to normalisation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .errors import ProposalStarvation
from .checkpoint import load_checkpoint, save_checkpoint
from .networks import dense, init_weight, slice_block
from .optim import AdamState, ParamStore, adam_step, clip_global_norm, value_and_grad

__all__ = ["GuardClassifier", "guarded_propose", "effective_prior_report"]


class _LogLossModel:
    """Cross-entropy on the sigmoid logit: softplus(a) - y * a."""

    def __init__(self, layout, x, y):
        self.layout = layout
        self.x = x
        self.y = y

    def logits(self, leaf, x):
        h = ad.tanh(
            dense(
                ad.constant(x),
                slice_block(leaf, self.layout, "dense0.W"),
                slice_block(leaf, self.layout, "dense0.b"),
            )
        )
        out = dense(
            h,
            slice_block(leaf, self.layout, "out.W"),
            slice_block(leaf, self.layout, "out.b"),
        )
        return out[:, 0]

    def loss(self, values, batch, rng):
        a = self.logits(values, self.x)
        return ad.tmean(ad.softplus(a) - ad.constant(self.y) * a)


class GuardClassifier(BaseEstimator):
    """Online bad-simulation predictor with an accept-all warmup.

    Until `min_labels_per_class` examples of each class have been seen, the
    guard reports itself not ready and proposal thinning is bypassed; training
    on whatever labels exist is harmless and happens anyway.
    """

    def __init__(
        self,
        hidden=20,
        epochs=200,
        batch_size=100,
        learning_rate=1e-3,
        clip_threshold=0.1,
        min_labels_per_class=50,
        seed=0,
    ):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip_threshold = clip_threshold
        self.min_labels_per_class = min_labels_per_class
        self.seed = seed

    def _ensure_net(self, theta_dim):
        if getattr(self, "params_", None) is None:
            rng = np.random.default_rng(self.seed)
            self.params_ = ParamStore.from_blocks(
                {
                    "dense0.W": init_weight(rng, (theta_dim, self.hidden)),
                    "dense0.b": np.zeros(self.hidden),
                    "out.W": init_weight(rng, (self.hidden, 1)),
                    "out.b": np.zeros(1),
                }
            )
            self.theta_dim_ = theta_dim
            self.buffer_theta_ = np.zeros((0, theta_dim))
            self.buffer_label_ = np.zeros(0)
            self._train_rng = np.random.default_rng(
                np.random.SeedSequence(self.seed).spawn(1)[0]
            )

    @property
    def ready(self):
        if getattr(self, "params_", None) is None:
            return False
        n_bad = int(self.buffer_label_.sum())
        n_good = len(self.buffer_label_) - n_bad
        return min(n_bad, n_good) >= self.min_labels_per_class

    def fit(self, thetas, labels):
        """Reset the buffer and train from scratch on (theta, bad) pairs."""
        self.params_ = None
        return self.update(thetas, labels)

    def update(self, thetas, labels):
        """Append pairs from the finished round and retrain on the buffer."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.float64).ravel()
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be binary")
        self._ensure_net(thetas.shape[1])
        self.buffer_theta_ = np.vstack([self.buffer_theta_, thetas])
        self.buffer_label_ = np.concatenate([self.buffer_label_, labels])

        # standardisation refitted on the full buffer before each retrain
        self.input_mean_ = self.buffer_theta_.mean(axis=0)
        scale = self.buffer_theta_.std(axis=0)
        self.input_std_ = np.where(scale > 1e-8, scale, 1.0)

        x = (self.buffer_theta_ - self.input_mean_) / self.input_std_
        y = self.buffer_label_
        model = _LogLossModel(self.params_.layout, x, y)
        params = self.params_
        opt = AdamState.init(params.size, lr=self.learning_rate)
        rng = self._train_rng
        n = len(y)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                idx = order[lo : lo + self.batch_size]
                step_model = _LogLossModel(params.layout, x[idx], y[idx])
                report = value_and_grad(step_model, params, None, rng)
                grad = clip_global_norm(report.grad, self.clip_threshold)
                opt, params = adam_step(opt, params, grad)
        self.params_ = params
        return self

    def bad_probability(self, thetas):
        """g(theta): predicted probability that the simulation breaks."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        if getattr(self, "params_", None) is None:
            return np.full(len(thetas), 0.5)
        x = (thetas - self.input_mean_) / self.input_std_
        model = _LogLossModel(self.params_.layout, x, None)
        logits = model.logits(ad.Tensor(self.params_.values), x).value
        return 1.0 / (1.0 + np.exp(-logits))

    def predict_proba(self, thetas):
        bad = self.bad_probability(thetas)
        return np.column_stack([1.0 - bad, bad])

    def save(self, path):
        arrays = {name: self.params_.block(name).ravel() for name in self.params_.layout}
        arrays["input_mean"] = self.input_mean_
        arrays["input_std"] = self.input_std_
        spec = {
            "theta_dim": self.theta_dim_,
            "hidden": self.hidden,
            "n_labels": int(len(self.buffer_label_)),
        }
        save_checkpoint(path, "guard", spec, arrays)

    @classmethod
    def load(cls, path):
        kind, spec, arrays = load_checkpoint(path)
        if kind != "guard":
            raise ValueError(f"expected a guard checkpoint, got {kind!r}")
        guard = cls(hidden=spec["hidden"])
        guard._ensure_net(spec["theta_dim"])
        blocks = {
            name: arrays[name].reshape(shape)
            for name, (_, shape) in guard.params_.layout.items()
        }
        guard.params_ = ParamStore.from_blocks(blocks)
        guard.input_mean_ = arrays["input_mean"]
        guard.input_std_ = arrays["input_std"]
        return guard


def guarded_propose(proposal, guard, n, rng, max_consecutive_rejections=100_000):
    """Draw n parameters from the proposal, thinned by the guard.

    Each draw is accepted with probability 1 - g(theta); accepted draws keep
    their draw order so parallel simulation downstream cannot reorder output.
    Returns (thetas, n_rejected).
    """
    accepted = []
    n_rejected = 0
    consecutive = 0
    use_guard = guard is not None and guard.ready
    while len(accepted) < n:
        want = n - len(accepted)
        block = proposal.sample(max(want, 64), rng)
        if not use_guard:
            accepted.extend(block[:want])
            continue
        g = guard.bad_probability(block)
        u = rng.random(len(block))
        for theta, keep in zip(block, u >= g):
            if keep:
                accepted.append(theta)
                consecutive = 0
                if len(accepted) == n:
                    break
            else:
                n_rejected += 1
                consecutive += 1
                if consecutive > max_consecutive_rejections:
                    raise ProposalStarvation(
                        f"{consecutive} consecutive rejections; guard collapsed"
                    )
    return np.array(accepted), n_rejected


def effective_prior_report(prior, guard, grid):
    """Unnormalised effective-prior mass prior(theta) * (1 - g(theta)) on a
    grid of parameter points (one row per point)."""
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    with np.errstate(over="ignore"):
        base = np.exp(prior.log_pdf(grid))
    survive = 1.0 - guard.bad_probability(grid) if guard is not None else 1.0
    return base * survive
