"""Sequential rounds of propose, simulate, filter, train, extract.

Each round draws parameters from the current proposal prior (thinned by the
guard when it is ready), simulates, weights every sample by prior/proposal
times the calibration-kernel value, trains the Bayesian mixture network on
the round's data with the previous round's weight posterior as a prior, and
extracts the posterior estimate at the observation, which becomes the next
proposal. A point-weight mode with the analytic division correction is
provided as the comparison baseline.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .distributions import BoxUniform, DiagonalGaussian, GaussianMixture, divide_gaussian
from .errors import AllZeroWeights, DegenerateProposal
from .features import FeatureStandardizer, FeatureVector
from .guard import guarded_propose
from .mdn import BayesianMdn, MdnSpec, MixtureDensityNetwork, TrainingBatch
from .optim import AdamState, adam_step, clip_global_norm, value_and_grad

__all__ = [
    "child_seed",
    "CalibrationKernel",
    "importance_weight",
    "normalize_weights",
    "SnpeConfig",
    "RoundState",
    "SNPE",
    "CDELFI",
]

# rng stream ids under a (master, round) key
_STREAM_PROPOSE, _STREAM_SIM, _STREAM_TRAIN, _STREAM_GROW = 0, 1, 2, 3


def child_seed(master, *key):
    """Deterministic, order-independent derived seed."""
    return np.random.SeedSequence(entropy=master, spawn_key=tuple(int(k) for k in key))


@dataclass(frozen=True)
class CalibrationKernel:
    """Per-sample weight by proximity to the observation.

    The default binary kind only zeroes bad simulations; the gaussian kind
    additionally down-weights samples by squared distance to the observation
    on standardised features (coordinates observed on both sides).
    """

    kind: str = "bad-sim"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bad-sim", "gaussian"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")

    def values(self, x_std, mask, bad, x_o_std, mask_o):
        bad = np.asarray(bad, dtype=np.float64)
        base = 1.0 - bad
        if self.kind == "gaussian":
            both = (np.asarray(mask) == 0) & (np.asarray(mask_o) == 0)[None, :]
            diff = np.where(both, x_std - x_o_std[None, :], 0.0)
            d2 = (diff * diff).sum(axis=1)
            base = base * np.exp(-d2 / (2.0 * self.bandwidth**2))
        return base

    def to_dict(self):
        return {"kind": self.kind, "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def importance_weight(prior, proposal, theta):
    """p(theta) / proposal(theta); zero outside the prior's support.

    Raises DegenerateProposal if the proposal assigns zero density where the
    prior does not (cannot happen for draws from the proposal itself).
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    logp = np.atleast_1d(prior.log_pdf(theta))
    logq = np.atleast_1d(proposal.log_pdf(theta))
    if np.any(np.isneginf(logq) & ~np.isneginf(logp)):
        raise DegenerateProposal("proposal has zero density at a supported point")
    with np.errstate(over="ignore"):
        w = np.where(np.isneginf(logp), 0.0, np.exp(logp - logq))
    return w if w.size > 1 else float(w[0])


def normalize_weights(weights):
    """Scale a round's importance weights to mean 1 (zeros included)."""
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise AllZeroWeights("every weight in the round is zero")
    return weights * (weights.size / total)


@dataclass(frozen=True)
class SnpeConfig:
    """Round budget, network size, and optimisation settings.

    `components` is either one count for all rounds or a per-round schedule;
    growing the count at a round boundary copies the dominant component.
    Before `continuity_start_round` (and whenever the component count just
    grew) the weight prior is the fixed zero-mean Gaussian with precision
    `weight_prior_precision`; afterwards it chains from the previous round.
    """

    n_rounds: int = 6
    n_per_round: int = 1000
    components: int | tuple[int, ...] = 1
    hidden: tuple[int, ...] = (50, 50)
    activation: str = "tanh"
    weight_prior_precision: float = 0.01
    clip_threshold: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 500
    batch_size: int = 100
    continuity_start_round: int = 3
    kernel: CalibrationKernel = field(default_factory=CalibrationKernel)
    retain_all_rounds: bool = False
    standardize_theta: bool = True
    impute_missing: bool = True
    use_effective_prior_weights: bool = False
    sim_chunk: int = 200
    average_tail: float = 0.25  # fraction of final epochs averaged (Polyak)

    def __post_init__(self):
        if self.n_rounds < 1 or self.n_per_round < 1:
            raise ValueError("need n_rounds >= 1 and n_per_round >= 1")
        if self.weight_prior_precision <= 0:
            raise ValueError("weight prior precision must be positive")

    def components_for_round(self, r):
        if isinstance(self.components, int):
            return self.components
        return self.components[r - 1]

    @property
    def default_weight_prior_std(self):
        return 1.0 / np.sqrt(self.weight_prior_precision)


@dataclass
class RoundState:
    """Carryover between rounds: the adaptive proposal, the accumulated
    posterior over network weights, and run diagnostics."""

    round_index: int
    proposal: object
    weight_prior: DiagonalGaussian | None
    seed: int
    diagnostics: list = field(default_factory=list)
    standardizer: FeatureStandardizer = field(default_factory=FeatureStandardizer)
    retained: list = field(default_factory=list)


def _simulate_chunk(args):
    simulator, featurizer, thetas, seeds = args
    outputs = simulator.simulate_batch(thetas, seeds)
    feats = [featurizer(out) for out in outputs]
    return [(fv.values, fv.mask, fv.bad) for fv in feats]


def simulate_and_featurize(simulator, featurizer, thetas, seeds, chunk=200, workers=1):
    """Run simulations in fixed-size chunks and summarise each output.

    Chunk boundaries are independent of the worker count and every draw

    carries its own seed, so results are bit-identical however this is
    parallelised. Returns (values, masks, bads) arrays in draw order.
    """
    jobs = [
        (simulator, featurizer, thetas[lo : lo + chunk], seeds[lo : lo + chunk])
        for lo in range(0, len(thetas), chunk)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_simulate_chunk, jobs))
    else:
        results = [_simulate_chunk(j) for j in jobs]
    flat = [t for chunk_result in results for t in chunk_result]
    values = np.array([f[0] for f in flat])
    masks = np.array([f[1] for f in flat])
    bads = np.array([f[2] for f in flat], dtype=np.float64)
    return values, masks, bads


class SNPE(BaseEstimator):
    """Sequential neural posterior estimation, fit/predict style.

    Parameters mirror the config; `fit(observed)` runs all rounds against the
    raw observed simulator output and leaves the final posterior (raw
    parameter space) in `posterior_`.
    """

    def __init__(
        self,
        simulator,
        prior,
        featurizer,
        config=None,
        guard=None,
        seed=0,
        theta_names=None,
        workers=1,
        artifact_writer=None,
    ):
        self.simulator = simulator
        self.prior = prior
        self.featurizer = featurizer
        self.config = config
        self.guard = guard
        self.seed = seed
        self.theta_names = theta_names
        self.workers = workers
        self.artifact_writer = artifact_writer

    # -- construction helpers -------------------------------------------------

    def _theta_transform(self, config):
        if not config.standardize_theta:
            d = self.prior.dim
            return np.zeros(d), np.ones(d)
        return self.prior.mean(), self.prior.marginal_std()

    def _build_model(self, config, x_o_fv, n_components):
        if self.featurizer.kind == "gru":
            spec = MdnSpec(
                n_inputs=self.featurizer.n_channels,
                theta_dim=self.prior.dim,
                n_components=n_components,
                hidden=config.hidden,
                activation=config.activation,
                frontend="gru",
                gru_units=self.featurizer.n_units,
            )
        else:
            spec = MdnSpec(
                n_inputs=x_o_fv.dim,
                theta_dim=self.prior.dim,
                n_components=n_components,
                hidden=config.hidden,
                activation=config.activation,
                frontend="impute" if config.impute_missing else "plain",
            )
        return BayesianMdn.create(spec, np.random.default_rng(child_seed(self.seed, 0, _STREAM_GROW)))

    def _network_inputs(self, values, masks, state):
        """Standardised network inputs (and masks) for a block of samples."""
        if self.featurizer.kind == "gru":
            return values.reshape(len(values), -1, self.featurizer.n_channels), None
        filled = np.where(masks > 0, 0.0, values)
        x = state.standardizer.transform(filled)
        x = np.where(masks > 0, 0.0, x)
        return x, masks

    # -- the round body ---------------------------------------------------------

    def run_round(self, state, model, x_o_fv, config):
        """Alg-style round: propose, simulate, weight, train, extract."""
        r = state.round_index
        t_start = time.perf_counter()
        t_mean, t_std = self._theta_transform(config)

        n_components = config.components_for_round(r)
        grew = False
        if model is None:
            model = self._build_model(config, x_o_fv, n_components)
        elif model.spec.n_components != n_components:
            model = model.add_component(
                np.random.default_rng(child_seed(self.seed, r, _STREAM_GROW))
            )
            grew = True

        rng_prop = np.random.default_rng(child_seed(self.seed, r, _STREAM_PROPOSE))
        thetas, n_rejected = guarded_propose(
            state.proposal, self.guard, config.n_per_round, rng_prop
        )

        seeds = [child_seed(self.seed, r, _STREAM_SIM, i) for i in range(len(thetas))]
        values, masks, bads = simulate_and_featurize(
            self.simulator, self.featurizer, thetas, seeds,
            chunk=config.sim_chunk, workers=self.workers,
        )

        if self.guard is not None:
            self.guard.update(thetas, bads)

        if not state.standardizer.fitted and self.featurizer.kind != "gru":
            good = bads == 0
            if not good.any():
                raise AllZeroWeights("round produced no good simulations")
            state.standardizer.fit(values[good], masks[good])

        # importance weights p(theta)/proposal(theta), normalised per round
        if r == 1 and state.proposal is self.prior:
            iw = np.ones(len(thetas))
        else:
            iw = importance_weight(
                self._weight_density(config), state.proposal, thetas
            )
        iw = normalize_weights(iw)

        if config.kernel.kind == "gaussian" and self.featurizer.kind == "gru":
            raise ValueError("distance kernels need summary features, not traces")
        x_std, net_masks = self._network_inputs(values, masks, state)
        x_o_std, mask_o = self._network_inputs(
            x_o_fv.values[None], x_o_fv.mask[None], state
        )
        kernel_values = config.kernel.values(
            x_std, masks, bads, x_o_std[0], x_o_fv.mask
        )

        sample_weights = iw * kernel_values
        if not np.any(sample_weights > 0):
            raise AllZeroWeights("all samples are bad or off-support this round")

        theta_std = (thetas - t_mean) / t_std
        record = {
            "theta": theta_std,
            "x": x_std,
            "mask": net_masks,
            "weights": sample_weights,
        }
        training = [record]
        if config.retain_all_rounds:
            training = state.retained + training
            state.retained = training

        weight_prior = state.weight_prior
        if r < config.continuity_start_round or grew or weight_prior is None:
            weight_prior = DiagonalGaussian(
                mean=np.zeros(model.n_weights),
                std=np.full(model.n_weights, config.default_weight_prior_std),
            )

        model, loss_curve = self._train_bayesian(
            model, training, weight_prior, config, r
        )

        posterior_std = model.extract_posterior(
            x_o_std[0], mask_o[0] if mask_o is not None else None
        )
        posterior = posterior_std.affine(t_mean, t_std)
        posterior = GaussianMixture(
            weights=posterior.weights,
            means=posterior.means,
            chols=posterior.chols,
            dim_names=tuple(self.theta_names) if self.theta_names else None,
        )

        diag = {
            "round": r,
            "n_simulations": int(len(thetas)),
            "n_bad": int(bads.sum()),
            "n_rejected_by_guard": int(n_rejected),
            "importance_weights": {
                "mean": float(iw.mean()),
                "max": float(iw.max()),
                "ess": float(iw.sum() ** 2 / np.maximum((iw * iw).sum(), 1e-300)),
            },
            "loss_curve": loss_curve,
            "weight_prior_chained": bool(
                r >= config.continuity_start_round and not grew and state.weight_prior is not None
            ),
            "seconds": time.perf_counter() - t_start,
        }
        state.diagnostics.append(diag)

        if self.artifact_writer is not None:
            self.artifact_writer(
                round_index=r,
                posterior=posterior,
                diagnostics=diag,
                table={
                    "theta": thetas,
                    "x": values,
                    "mask": masks,
                    "bad": bads,
                    "iw": iw,
                    "kernel": kernel_values,
                },
            )

        # proposal chaining goes through the serialised form so the next
        # round sees exactly what was written to disk
        next_proposal = GaussianMixture.from_json(posterior.to_json())
        next_state = replace(
            state,
            round_index=r + 1,
            proposal=next_proposal,
            weight_prior=model.weight_posterior(),
        )
        return next_state, model, posterior

    def _weight_density(self, config):
        """The density whose ratio to the proposal forms the weights."""
        if config.use_effective_prior_weights and self.guard is not None:
            prior = self.prior
            guard = self.guard

            class _EffectivePrior:
                def log_pdf(self, theta):
                    with np.errstate(divide="ignore"):
                        return prior.log_pdf(theta) + np.log(
                            np.clip(1.0 - guard.bad_probability(theta), 1e-300, None)
                        )

            return _EffectivePrior()
        return self.prior

    def _train_bayesian(self, model, training, weight_prior, config, r):
        theta = np.concatenate([t["theta"] for t in training])
        x = np.concatenate([t["x"] for t in training])
        mask = (
            np.concatenate([t["mask"] for t in training])
            if training[0]["mask"] is not None
            else None
        )
        weights = np.concatenate([t["weights"] for t in training])
        n_total = len(theta)

        params = model.params
        opt = AdamState.init(params.size, lr=config.learning_rate)
        rng = np.random.default_rng(child_seed(self.seed, r, _STREAM_TRAIN))
        losses = []
        # averaging the tail of the trajectory removes endpoint jitter from
        # minibatch order, reparameterisation noise, and heavy-tailed weights
        tail_start = int((1.0 - config.average_tail) * config.epochs)
        tail_sum, n_tail = None, 0
        for epoch in range(config.epochs):
            order = rng.permutation(n_total)
            epoch_loss = 0.0
            n_batches = 0
            for lo in range(0, n_total, config.batch_size):
                idx = order[lo : lo + config.batch_size]
                batch = TrainingBatch(
                    theta=theta[idx],
                    x=x[idx],
                    mask=mask[idx] if mask is not None else None,
                    weights=weights[idx],
                    kl_weight=1.0 / n_total,
                    prior=weight_prior,
                )
                live = BayesianMdn(model.spec, params)
                report = value_and_grad(live, params, batch, rng)
                grad = clip_global_norm(report.grad, config.clip_threshold)
                opt, params = adam_step(opt, params, grad)
                epoch_loss += report.loss
                n_batches += 1
            losses.append(epoch_loss / n_batches)
            if epoch >= tail_start:
                values = params.values
                tail_sum = values.copy() if tail_sum is None else tail_sum + values
                n_tail += 1
        if n_tail > 0:
            params = params.with_values(tail_sum / n_tail)
        return BayesianMdn(model.spec, params), losses

    # -- estimator surface ------------------------------------------------------

    def fit(self, observed):
        """Run all configured rounds against raw observed simulator output."""
        config = self.config if self.config is not None else SnpeConfig()
        self.config_used_ = config
        x_o_fv = observed if isinstance(observed, FeatureVector) else self.featurizer(observed)
        if x_o_fv.bad:
            raise ValueError("the observation itself is flagged bad")

        state = RoundState(
            round_index=1,
            proposal=self.prior,
            weight_prior=None,
            seed=self.seed,
        )
        model = None
        self.posteriors_ = []
        self.proposals_used_ = []
        for _ in range(config.n_rounds):
            self.proposals_used_.append(state.proposal)
            state, model, posterior = self.run_round(state, model, x_o_fv, config)
            self.posteriors_.append(posterior)

        self.model_ = model
        self.posterior_ = self.posteriors_[-1]
        self.diagnostics_ = state.diagnostics
        self.state_ = state
        self.x_o_features_ = x_o_fv
        return self

    def sample_posterior(self, n, rng):
        return self.posterior_.sample(n, rng)


class CDELFI(BaseEstimator):
    """Conditional density estimation with the analytic proposal correction.

    Trains an unweighted single-Gaussian conditional density on each round's
    simulations and divides out the Gaussian proposal afterwards. The division
    raises NonPositivePrecision whenever the proposal is sharper than the
    learned conditional, which is this method's documented instability.
    """

    def __init__(
        self,
        simulator,
        prior,
        featurizer,
        config=None,
        seed=0,
        theta_names=None,
        workers=1,
    ):
        self.simulator = simulator
        self.prior = prior
        self.featurizer = featurizer
        self.config = config
        self.seed = seed
        self.theta_names = theta_names
        self.workers = workers

    def fit(self, observed):
        config = self.config if self.config is not None else SnpeConfig(components=1)
        if config.components_for_round(1) != 1:
            raise ValueError("the analytic correction requires a single Gaussian")
        x_o_fv = observed if isinstance(observed, FeatureVector) else self.featurizer(observed)

        t_mean = self.prior.mean() if config.standardize_theta else np.zeros(self.prior.dim)
        t_std = self.prior.marginal_std() if config.standardize_theta else np.ones(self.prior.dim)

        standardizer = FeatureStandardizer()
        proposal = self.prior
        model = None
        self.posteriors_ = []
        for r in range(1, config.n_rounds + 1):
            rng_prop = np.random.default_rng(child_seed(self.seed, r, _STREAM_PROPOSE))
            thetas = proposal.sample(config.n_per_round, rng_prop)
            seeds = [child_seed(self.seed, r, _STREAM_SIM, i) for i in range(len(thetas))]
            values, masks, bads = simulate_and_featurize(
                self.simulator, self.featurizer, thetas, seeds,
                chunk=config.sim_chunk, workers=self.workers,
            )
            good = bads == 0
            if not good.any():
                raise AllZeroWeights("round produced no good simulations")
            if not standardizer.fitted:
                standardizer.fit(values[good], masks[good])

            if model is None:
                spec = MdnSpec(
                    n_inputs=x_o_fv.dim,
                    theta_dim=self.prior.dim,
                    n_components=1,
                    hidden=config.hidden,
                    activation=config.activation,
                    frontend="impute" if config.impute_missing else "plain",
                )
                model = MixtureDensityNetwork.create(
                    spec, np.random.default_rng(child_seed(self.seed, 0, _STREAM_GROW))
                )

            filled = np.where(masks > 0, 0.0, values)
            x = standardizer.transform(filled)
            x = np.where(masks > 0, 0.0, x)
            theta_std = (thetas - t_mean) / t_std

            model = self._train_point(
                model,
                theta_std[good],
                x[good],
                masks[good],
                config,
                r,
            )

            x_o_std = standardizer.transform(np.where(x_o_fv.mask > 0, 0.0, x_o_fv.values))
            x_o_std = np.where(x_o_fv.mask > 0, 0.0, x_o_std)
            conditional = model.mixture_at(x_o_std, x_o_fv.mask).affine(t_mean, t_std)

            denominator = None if isinstance(proposal, BoxUniform) else proposal
            corrected = divide_gaussian(conditional, denominator, prior=self.prior)
            posterior = GaussianMixture(
                weights=corrected.weights,
                means=corrected.means,
                chols=corrected.chols,
                dim_names=tuple(self.theta_names) if self.theta_names else None,
            )
            self.posteriors_.append(posterior)
            proposal = GaussianMixture.from_json(posterior.to_json())

        self.model_ = model
        self.posterior_ = self.posteriors_[-1]
        return self

    def _train_point(self, model, theta, x, masks, config, r):
        params = model.params
        opt = AdamState.init(params.size, lr=config.learning_rate)
        rng = np.random.default_rng(child_seed(self.seed, r, _STREAM_TRAIN))
        n = len(theta)
        tail_start = int((1.0 - config.average_tail) * config.epochs)
        tail_sum, n_tail = None, 0
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for lo in range(0, n, config.batch_size):
                idx = order[lo : lo + config.batch_size]
                batch = TrainingBatch(theta=theta[idx], x=x[idx], mask=masks[idx])
                live = MixtureDensityNetwork(model.spec, params)
                report = value_and_grad(live, params, batch, rng)
                grad = clip_global_norm(report.grad, config.clip_threshold)
                opt, params = adam_step(opt, params, grad)
            if epoch >= tail_start:
                values = params.values
                tail_sum = values.copy() if tail_sum is None else tail_sum + values
                n_tail += 1
        if n_tail > 0:
            params = params.with_values(tail_sum / n_tail)
        return MixtureDensityNetwork(model.spec, params)
