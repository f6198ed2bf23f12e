"""Mixture-density networks mapping features to Gaussian-mixture posteriors.

Two flavours share one architecture: a point-weight network trained by
weighted maximum likelihood, and a mean-field Bayesian network whose weights
carry per-coordinate Gaussians (mean, std) and which is trained by stochastic
variational inference with a round-to-round KL continuity penalty.

The input layer optionally imputes missing features with learnable constants
h_i = f_i * (1 - m_i) + c_i * m_i, or is replaced by a gated-recurrent
front end that learns features from raw (voltage, stimulus) traces.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .distributions import DiagonalGaussian, GaussianMixture
from .errors import NonFiniteOutput
from .networks import ACTIVATIONS, dense, dense_reparam, init_weight, slice_block
from .optim import ParamStore

_LOG_2PI = float(np.log(2.0 * np.pi))

__all__ = [
    "MdnSpec",
    "TrainingBatch",
    "MixtureDensityNetwork",
    "BayesianMdn",
    "mdn_log_loss",
    "svi_loss",
]


@dataclass(frozen=True)
class MdnSpec:
    """Architecture of a mixture-density network.

    `n_inputs` is the feature count for dense front ends, or the number of
    trace channels when `frontend` is "gru". Precision-factor diagonals go
    through exp, so any finite weights yield a valid mixture.
    """

    n_inputs: int
    theta_dim: int
    n_components: int = 1
    hidden: tuple[int, ...] = (50, 50)
    activation: str = "tanh"
    frontend: str = "impute"  # "impute" | "plain" | "gru"
    gru_units: int = 25

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("need at least one mixture component")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.frontend not in ("impute", "plain", "gru"):
            raise ValueError(f"unknown frontend {self.frontend!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def n_tri(self):
        return self.theta_dim * (self.theta_dim + 1) // 2

    def weight_blocks(self):
        """Ordered (name, shape) for blocks that carry weight uncertainty."""
        blocks = []
        if self.frontend == "gru":
            u, ni = self.gru_units, self.n_inputs
            for gate in ("update", "reset", "cand"):
                blocks += [
                    (f"gru.{gate}.Wx", (ni, u)),
                    (f"gru.{gate}.Wh", (u, u)),
                    (f"gru.{gate}.b", (u,)),
                ]
            n_in = u
        else:
            n_in = self.n_inputs
        for i, h in enumerate(self.hidden):
            blocks += [(f"dense{i}.W", (n_in, h)), (f"dense{i}.b", (h,))]
            n_in = h
        K, d = self.n_components, self.theta_dim
        blocks += [
            ("logits.W", (n_in, K)),
            ("logits.b", (K,)),
            ("means.W", (n_in, K * d)),
            ("means.b", (K * d,)),
            ("scales.W", (n_in, K * self.n_tri)),
            ("scales.b", (K * self.n_tri,)),
        ]
        return blocks

    def point_blocks(self):
        """Blocks trained as plain parameters even in the Bayesian network."""
        if self.frontend == "impute":
            return [("impute.c", (self.n_inputs,))]
        return []

    @property
    def n_weights(self):
        return sum(int(np.prod(s, dtype=int)) for _, s in self.weight_blocks())

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainingBatch:
    """One (mini)batch of the round's training problem.

    theta:   (B, d) targets, in the network's (standardised) space
    x:       (B, F) features with masked entries zero-filled, or (B, T, C)
             traces for the recurrent front end
    mask:    (B, F) missing indicators, or None
    weights: (B,) per-sample loss weights (importance weight * kernel value)
    kl_weight / prior: continuity penalty weight (1/N) and the previous
             round's weight posterior; both unused for point training
    """

    theta: np.ndarray
    x: np.ndarray
    mask: np.ndarray | None = None
    weights: np.ndarray | None = None
    kl_weight: float = 0.0
    prior: DiagonalGaussian | None = None

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64))
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64)
            self.x = np.where(self.mask > 0, 0.0, self.x)
        if self.weights is None:
            self.weights = np.ones(len(self.theta))
        self.weights = np.asarray(self.weights, dtype=np.float64)

    def __len__(self):
        return len(self.theta)


def _gru_scan(weights, x):
    """Run the gated-recurrent recursion; returns the final hidden state.

    `weights` maps block name -> tape tensor; `x` is a constant (B, T, C)
    array. Update/reset gates and the candidate state follow the standard
    formulation; the many-to-one readout is the last hidden state.
    """
    B, T, _ = x.shape
    u = weights["gru.update.b"].value.shape[0]
    h = ad.constant(np.zeros((B, u)))
    for t in range(T):
        xt = x[:, t, :]  # plain ndarray: data carries no gradient
        z = ad.sigmoid(
            ad.matmul(ad.constant(xt), weights["gru.update.Wx"])
            + ad.matmul(h, weights["gru.update.Wh"])
            + weights["gru.update.b"]
        )
        r = ad.sigmoid(
            ad.matmul(ad.constant(xt), weights["gru.reset.Wx"])
            + ad.matmul(h, weights["gru.reset.Wh"])
            + weights["gru.reset.b"]
        )
        cand = ad.tanh(
            ad.matmul(ad.constant(xt), weights["gru.cand.Wx"])
            + ad.matmul(r * h, weights["gru.cand.Wh"])
            + weights["gru.cand.b"]
        )
        h = (1.0 - z) * h + z * cand
    return h


class _MixtureForward:
    """Shared forward pass; subclasses decide how layers see their weights."""

    def __init__(self, spec):
        self.spec = spec

    def _frontend_output(self, leaf, batch, rng):
        spec = self.spec
        if spec.frontend == "gru":
            names = [n for n, _ in spec.weight_blocks() if n.startswith("gru.")]
            weights = {n: self._sampled_block(leaf, n, rng) for n in names}
            return _gru_scan(weights, batch.x)
        x = ad.constant(batch.x)
        if spec.frontend == "plain":
            return x
        c = slice_block(leaf, self._layout, "impute.c")
        if batch.mask is None:
            return x
        m = batch.mask
        return x * (1.0 - m) + c * m

    def heads(self, leaf, batch, rng):
        """Returns (log_alpha (B,K), means (B,K,d), U (B,K,d,d), logdiag)."""
        spec = self.spec
        h = self._frontend_output(leaf, batch, rng)
        act = ACTIVATIONS[spec.activation]
        for i in range(len(spec.hidden)):
            h = act(self._dense(leaf, f"dense{i}", h, rng))
        K, d = spec.n_components, spec.theta_dim
        z = self._dense(leaf, "logits", h, rng)
        mus = ad.reshape(self._dense(leaf, "means", h, rng), (-1, K, d))
        s = ad.reshape(self._dense(leaf, "scales", h, rng), (-1, K, spec.n_tri))
        # exp diagonal: the head output is the log precision scale, so sharp
        # and broad components are equally reachable by gradient steps
        log_diag = s[:, :, :d]
        diag = ad.exp(log_diag)
        off = s[:, :, d:]
        U = ad.triangular_matrix(diag, off, d, upper=True)
        log_alpha = z - ad.logsumexp(z, axis=1, keepdims=True)
        return log_alpha, mus, U, log_diag

    def log_prob(self, leaf, batch, rng):
        """Per-sample mixture log-density log q(theta | x), shape (B,)."""
        spec = self.spec
        log_alpha, mus, U, logdiag = self.heads(leaf, batch, rng)
        theta = batch.theta[:, None, :]  # (B, 1, d) constant
        r = mus - theta
        # (U^T r)_j = sum_i U_ij r_i; precision is U U^T per component
        ur = ad.tsum(U * ad.reshape(r, (-1, spec.n_components, spec.theta_dim, 1)), axis=-2)
        quad = ad.tsum(ad.square(ur), axis=-1)
        logdet = ad.tsum(logdiag, axis=-1)
        log_comp = logdet - 0.5 * quad - 0.5 * spec.theta_dim * _LOG_2PI
        return ad.logsumexp(log_alpha + log_comp, axis=-1)

    def mixture_from_heads(self, log_alpha, mus, U, dim_names=None):
        """Numpy conversion of one row of head outputs to a GaussianMixture."""
        if not (
            np.all(np.isfinite(log_alpha))
            and np.all(np.isfinite(mus))
            and np.all(np.isfinite(U))
        ):
            raise NonFiniteOutput("network produced non-finite mixture parameters")
        weights = np.exp(log_alpha - log_alpha.max())
        weights = weights / weights.sum()
        d = self.spec.theta_dim
        chols = []
        for k in range(self.spec.n_components):
            # precision is U U^T with U upper triangular, so the covariance
            # Cholesky factor is U^{-T}; inverting the triangle directly
            # avoids squaring tiny diagonals into underflow
            L = solve_triangular(U[k], np.eye(d), lower=False).T
            chols.append(L)
        chols = np.stack(chols)
        if not np.all(np.isfinite(chols)):
            raise NonFiniteOutput("mixture covariance overflowed")
        return GaussianMixture(
            weights=weights, means=mus, chols=chols, dim_names=dim_names
        )


def _stagger_mixture_heads(spec, scales_bias, means_bias, rng):
    """Symmetry-breaking head initialisation.

    Components start at staggered widths (log-precision offsets 0..2) and
    slightly jittered means; identical starts make gradient descent collapse
    the mixture onto one component before scales can specialise.
    """
    K, d, n_tri = spec.n_components, spec.theta_dim, spec.n_tri
    for k in range(K):
        offset = 2.0 * k / max(K - 1, 1)
        scales_bias[k * n_tri : k * n_tri + d] += offset
    means_bias += 0.1 * rng.standard_normal(means_bias.size)


class MixtureDensityNetwork(_MixtureForward):
    """Point-weight MDN; the conditional-density model behind the analytic
    proposal-correction baseline, and the deterministic core of the Bayesian
    network."""

    def __init__(self, spec, params):
        super().__init__(spec)
        self.params = params
        self._layout = params.layout

    @classmethod
    def create(cls, spec, rng):
        blocks = {n: init_weight(rng, s) for n, s in spec.weight_blocks()}
        _stagger_mixture_heads(spec, blocks["scales.b"], blocks["means.b"], rng)
        for n, s in spec.point_blocks():
            blocks[n] = np.zeros(s)
        return cls(spec, ParamStore.from_blocks(blocks))

    def _dense(self, leaf, name, h, rng):
        return dense(
            h,
            slice_block(leaf, self._layout, f"{name}.W"),
            slice_block(leaf, self._layout, f"{name}.b"),
        )

    def _sampled_block(self, leaf, name, rng):
        return slice_block(leaf, self._layout, name)

    def loss(self, values, batch, rng):
        """Weighted negative log-likelihood, averaged over the batch."""
        logq = self.log_prob(values, batch, rng)
        return -ad.tmean(ad.constant(batch.weights) * logq)

    def mixture_at(self, x, mask=None, values=None, dim_names=None):
        """Forward one feature vector to its Gaussian mixture over theta."""
        values = self.params.values if values is None else values
        batch = TrainingBatch(
            theta=np.zeros((1, self.spec.theta_dim)),
            x=np.asarray(x, dtype=np.float64)[None],
            mask=None if mask is None else np.asarray(mask, dtype=np.float64)[None],
        )
        log_alpha, mus, U, _ = self.heads(ad.Tensor(values), batch, None)
        return self.mixture_from_heads(
            log_alpha.value[0], mus.value[0], U.value[0], dim_names=dim_names
        )

    def save(self, path):
        save_checkpoint(
            path,
            "mdn",
            self.spec.to_dict(),
            {name: self.params.block(name).ravel() for name in self.params.layout},
        )

    @classmethod
    def load(cls, path):
        kind, spec_dict, arrays = load_checkpoint(path)
        if kind != "mdn":
            raise ValueError(f"expected an mdn checkpoint, got {kind!r}")
        spec = MdnSpec.from_dict(spec_dict)
        blocks = {n: arrays[n].reshape(s) for n, s in spec.weight_blocks()}
        for n, s in spec.point_blocks():
            blocks[n] = arrays[n].reshape(s)
        return cls(spec, ParamStore.from_blocks(blocks))


class BayesianMdn(_MixtureForward):
    """MDN with independent Gaussian uncertainty on every weight.

    The flat parameter vector is [means of all weights | log-stds of all
    weights | point blocks]; dense layers sample pre-activations via the
    local reparameterisation, the recurrent front end samples its weights
    once per forward pass.
    """

    init_std = 1e-3

    def __init__(self, spec, params):
        super().__init__(spec)
        self.params = params
        self._layout = params.layout
        self.n_weights = spec.n_weights

    @classmethod
    def create(cls, spec, rng):
        blocks = {}
        for n, s in spec.weight_blocks():
            blocks[f"{n}.m"] = init_weight(rng, s)
        _stagger_mixture_heads(spec, blocks["scales.b.m"], blocks["means.b.m"], rng)
        for n, s in spec.weight_blocks():
            blocks[f"{n}.rho"] = np.full(s, np.log(cls.init_std))
        for n, s in spec.point_blocks():
            blocks[n] = np.zeros(s)
        return cls(spec, ParamStore.from_blocks(blocks))

    # -- forward plumbing ---------------------------------------------------

    def _dense(self, leaf, name, h, rng):
        lay = self._layout
        w_m = slice_block(leaf, lay, f"{name}.W.m")
        b_m = slice_block(leaf, lay, f"{name}.b.m")
        if rng is None:  # deterministic pass through the weight means
            return dense(h, w_m, b_m)
        w_s = ad.exp(slice_block(leaf, lay, f"{name}.W.rho"))
        b_s = ad.exp(slice_block(leaf, lay, f"{name}.b.rho"))
        eps = rng.standard_normal((h.value.shape[0], b_m.value.shape[0]))
        return dense_reparam(h, w_m, b_m, w_s, b_s, eps)

    def _sampled_block(self, leaf, name, rng):
        lay = self._layout
        m = slice_block(leaf, lay, f"{name}.m")
        if rng is None:
            return m
        s = ad.exp(slice_block(leaf, lay, f"{name}.rho"))
        return m + s * rng.standard_normal(m.value.shape)

    # -- training objective ---------------------------------------------------

    def weight_kl(self, leaf, prior):
        """KL(current weight posterior || prior) on the tape, in nats."""
        W = self.n_weights
        m = leaf[0:W]
        rho = leaf[W : 2 * W]
        var_ratio = ad.exp(2.0 * (rho - np.log(prior.std)))
        mean_term = ad.square((m - prior.mean) / prior.std)
        return 0.5 * ad.tsum(var_ratio + mean_term - 1.0 - ad.log(var_ratio))

    def loss(self, values, batch, rng):
        """Reparameterised importance-weighted log-loss plus the continuity
        penalty (1/N) KL(posterior-over-weights || previous round's)."""
        logq = self.log_prob(values, batch, rng)
        out = -ad.tmean(ad.constant(batch.weights) * logq)
        if batch.kl_weight > 0.0 and batch.prior is not None:
            out = out + batch.kl_weight * self.weight_kl(values, batch.prior)
        return out

    # -- posterior access -----------------------------------------------------

    def weight_posterior(self):
        W = self.n_weights
        return DiagonalGaussian(
            mean=self.params.values[:W].copy(),
            std=np.exp(self.params.values[W : 2 * W]),
        )

    def sample_network(self, rng):
        """Draw one point-weight network w ~ N(phi_m, diag(phi_s^2))."""
        q = self.weight_posterior()
        return q.mean + q.std * rng.standard_normal(q.dim)

    def point_network(self, weights=None):
        """Point MDN at the weight means (or at an explicit weight vector)."""
        weights = (
            self.params.values[: self.n_weights] if weights is None else weights
        )
        blocks = {}
        for n, s in self.spec.weight_blocks():
            off, _ = self._layout[f"{n}.m"]
            size = int(np.prod(s, dtype=int))
            blocks[n] = weights[off : off + size].reshape(s)
        for n, s in self.spec.point_blocks():
            blocks[n] = self.params.block(n).copy()
        return MixtureDensityNetwork(self.spec, ParamStore.from_blocks(blocks))

    def extract_posterior(self, x_o, mask_o=None, dim_names=None):
        """Posterior estimate at the observation: forward at the weight means."""
        return self.point_network().mixture_at(x_o, mask_o, dim_names=dim_names)

    def imputation_values(self):
        if self.spec.frontend != "impute":
            return None
        return self.params.block("impute.c").copy()

    # -- component growth -----------------------------------------------------

    def add_component(self, rng, x_ref=None, noise_scale=1e-2):
        """Grow the mixture by one component.

        The new component's heads copy the currently dominant component (at
        the reference input, default all-zeros in standardised feature space),
        its mean head gets a small seeded offset, its logit bias is set so the
        new weight starts near 1/(K+1), and its weight stds restart at the
        initialisation std.
        """
        spec = self.spec
        K, d, n_tri = spec.n_components, spec.theta_dim, spec.n_tri
        if x_ref is None:
            if spec.frontend == "gru":
                x_ref = np.zeros((1, spec.n_inputs))
            else:
                x_ref = np.zeros(spec.n_inputs)

        point = self.point_network()
        batch = TrainingBatch(
            theta=np.zeros((1, d)),
            x=np.asarray(x_ref, dtype=np.float64)[None],
        )
        log_alpha, _, _, _ = point.heads(ad.Tensor(point.params.values), batch, None)
        log_alpha_ref = log_alpha.value[0]
        src = int(np.argmax(log_alpha_ref))

        new_spec = replace(spec, n_components=K + 1)
        head_groups = {"logits": 1, "means": d, "scales": n_tri}

        def extend(old, group, fill=None):
            """(..., K*group) -> (..., (K+1)*group); tail copies src's group."""
            new = np.empty(old.shape[:-1] + ((K + 1) * group,))
            new[..., : K * group] = old
            if fill is None:
                new[..., K * group :] = old[..., src * group : (src + 1) * group]
            else:
                new[..., K * group :] = fill
            return new

        def grown_block(name, suffix):
            old = self.params.block(name + suffix)
            head = name.split(".")[0]
            if head not in head_groups:
                return old.copy()
            fill = np.log(self.init_std) if suffix == ".rho" else None
            return extend(old, head_groups[head], fill=fill)

        # block order must stay [all means | all log-stds | point blocks]
        new_blocks = {}
        for n, _ in new_spec.weight_blocks():
            new_blocks[f"{n}.m"] = grown_block(n, ".m")
        for n, _ in new_spec.weight_blocks():
            new_blocks[f"{n}.rho"] = grown_block(n, ".rho")
        for n, _ in new_spec.point_blocks():
            new_blocks[n] = self.params.block(n).copy()

        # seeded mean offset on the new component's mean head
        new_blocks["means.b.m"][K * d :] += noise_scale * rng.standard_normal(d)

        # shift the copied logit by -log(K * alpha_src) so the new component
        # starts with weight ~ 1/(K+1) at the reference input
        lb = new_blocks["logits.b.m"]
        lb[K] = lb[src] - float(np.log(K) + log_alpha_ref[src])

        grown = BayesianMdn(new_spec, ParamStore.from_blocks(new_blocks))
        grown.params.validate()
        return grown

    # -- persistence ------------------------------------------------------

    def save(self, path):
        q = self.weight_posterior()
        arrays = {"phi_m": q.mean, "phi_s": q.std}
        c = self.imputation_values()
        if c is not None:
            arrays["impute.c"] = c
        save_checkpoint(path, "bayesian_mdn", self.spec.to_dict(), arrays)

    @classmethod
    def load(cls, path):
        kind, spec_dict, arrays = load_checkpoint(path)
        if kind != "bayesian_mdn":
            raise ValueError(f"expected a bayesian_mdn checkpoint, got {kind!r}")
        spec = MdnSpec.from_dict(spec_dict)
        blocks = {}
        cursor = 0
        phi_m, phi_s = arrays["phi_m"], arrays["phi_s"]
        for n, s in spec.weight_blocks():
            size = int(np.prod(s, dtype=int))
            blocks[f"{n}.m"] = phi_m[cursor : cursor + size].reshape(s)
            cursor += size
        cursor = 0
        for n, s in spec.weight_blocks():
            size = int(np.prod(s, dtype=int))
            blocks[f"{n}.rho"] = np.log(phi_s[cursor : cursor + size]).reshape(s)
            cursor += size
        for n, s in spec.point_blocks():
            blocks[n] = arrays["impute.c"].reshape(s)
        return cls(spec, ParamStore.from_blocks(blocks))


def mdn_log_loss(model, values, theta, x, mask, importance_weights, kernel_values, rng=None):
    """Importance-weighted log-loss -(1/N) sum iw_n K_n log q(theta_n | x_n)."""
    iw = np.asarray(importance_weights, dtype=np.float64)
    kv = np.asarray(kernel_values, dtype=np.float64)
    if np.any(iw < 0) or np.any((kv < 0) | (kv > 1)):
        raise ValueError("importance weights must be >= 0 and kernels in [0, 1]")
    batch = TrainingBatch(theta=theta, x=x, mask=mask, weights=iw * kv)
    leaf = values if isinstance(values, ad.Tensor) else ad.Tensor(values)
    return model.loss(leaf, batch, None if rng is None else np.random.default_rng(rng))


def svi_loss(bmdn, theta, x, mask, importance_weights, kernel_values, prior, n_total, rng):
    """Eq.-style variational round loss on the full round data.

    Data term uses the reparameterised expectation under the weight posterior;
    the KL continuity term enters with weight 1/n_total.
    """
    batch = TrainingBatch(
        theta=theta,
        x=x,
        mask=mask,
        weights=np.asarray(importance_weights) * np.asarray(kernel_values),
        kl_weight=1.0 / n_total,
        prior=prior,
    )
    loss = bmdn.loss(ad.Tensor(bmdn.params.values), batch, np.random.default_rng(rng))
    return float(loss.value)
