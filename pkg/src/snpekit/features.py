"""Summary-statistic extraction with explicit missing masks and bad flags.

A feature that is undefined for a given output (no spikes, zero variance) is
never silently NaN: its mask bit is set and downstream consumers read it only
through the network's imputation layer. A bad simulation sets the bad flag,
which zeroes its calibration-kernel value in training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .networks import slice_block

__all__ = [
    "FeatureVector",
    "spike_times",
    "hh_features",
    "glm_features",
    "gm_features",
    "autapse_features",
    "GruFeaturizer",
    "HhFeaturizer",
    "GlmFeaturizer",
    "GmFeaturizer",
    "AutapseFeaturizer",
    "FeatureStandardizer",
]

SPIKE_THRESHOLD = -10.0  # mV, upward crossing
SPIKE_REFRACTORY = 2.0  # ms between counted crossings


@dataclass
class FeatureVector:
    """values x, missing mask m (1 = undefined), and the bad-simulation bit."""

    values: np.ndarray
    mask: np.ndarray
    bad: bool = False
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        # masked entries carry NaN so accidental reads fail loudly
        self.values = np.where(self.mask > 0, np.nan, self.values)

    @property
    def dim(self):
        return self.values.size


def spike_times(v, dt, threshold=SPIKE_THRESHOLD, refractory=SPIKE_REFRACTORY):
    """Times of upward threshold crossings, thinned by the refractory window."""
    v = np.asarray(v)
    idx = np.nonzero((v[1:] >= threshold) & (v[:-1] < threshold))[0] + 1
    out = []
    last = -np.inf
    for i in idx:
        t = i * dt
        if t - last >= refractory:
            out.append(t)
            last = t
    return np.array(out)


_HH_LAGS_MS = np.arange(1.0, 11.0)  # 10 lagged autocorrelations, 1..10 ms


def hh_features(trace, onset=60.0, include_latency=False):
    """20 voltage summaries: spike count, resting potential, 10 lagged
    autocorrelations, first 8 moments (standardised for orders >= 3).

    With `include_latency`, the latency from stimulus onset to the first
    spike is appended as a 21st feature, masked when nothing spikes.
    """
    v = trace.channel("V")
    dt = trace.dt
    names = (
        ["spike_count", "rest_potential"]
        + [f"autocorr_{int(l)}ms" for l in _HH_LAGS_MS]
        + ["moment_1", "moment_2"]
        + [f"moment_{k}_std" for k in range(3, 9)]
    )
    nf = len(names) + (1 if include_latency else 0)
    if include_latency:
        names = names + ["spike_latency"]
    if trace.bad or not np.all(np.isfinite(v)):
        return FeatureVector(np.zeros(nf), np.ones(nf), bad=True, names=tuple(names))

    spikes = spike_times(v, dt)
    values = np.zeros(nf)
    mask = np.zeros(nf)
    values[0] = len(spikes)
    pre = v[: max(1, int(round(onset / dt)))]
    values[1] = pre.mean()

    centered = v - v.mean()
    var = float((centered * centered).mean())
    for j, lag_ms in enumerate(_HH_LAGS_MS):
        k = int(round(lag_ms / dt))
        if var <= 1e-12 or k >= v.size:
            mask[2 + j] = 1.0
        else:
            values[2 + j] = float((centered[:-k] * centered[k:]).mean()) / var

    values[12] = v.mean()
    values[13] = var
    sd = np.sqrt(var)
    for order in range(3, 9):
        col = 11 + order
        if var <= 1e-12:
            mask[col] = 1.0
        else:
            values[col] = float(((centered / sd) ** order).mean())

    if include_latency:
        if len(spikes) == 0:
            mask[-1] = 1.0
        else:
            values[-1] = float(spikes[0] - onset)
    return FeatureVector(values, mask, bad=False, names=tuple(names))


def glm_features(y, design):
    """Input-spike cross-correlation at the filter lags, scaled by 1/T.

    x_j = (1/T) sum_i y_i v_{i-j}; these are the sufficient statistics of the
    Bernoulli GLM given the frozen input.
    """
    y = np.asarray(y, dtype=np.float64)
    if len(y) != len(design):
        raise ValueError("spike train and design length differ")
    values = design.T @ y / len(y)
    names = tuple(f"xcorr_lag{j}" for j in range(design.shape[1]))
    return FeatureVector(values, np.zeros(values.size), bad=False, names=names)


def gm_features(samples):
    """Mean, log-variance and deciles of the sample set.

    With a single sample the variance is undefined and masked; the deciles
    all equal the draw, so conditioning on the feature vector is equivalent
    to conditioning on the raw draw.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("need at least one sample")
    deciles = np.percentile(samples, np.arange(10, 100, 10))
    names = ("mean", "log_variance") + tuple(f"decile_{k}" for k in range(10, 100, 10))
    values = np.concatenate([[samples.mean(), 0.0], deciles])
    mask = np.zeros(values.size)
    if samples.size < 2 or samples.var() <= 0:
        mask[1] = 1.0
    else:
        values[1] = np.log(samples.var())
    return FeatureVector(values, mask, bad=False, names=names)


def autapse_features(trace):
    """Time-mean of the rate trace (exact full-resolution value when the
    simulator recorded one)."""
    mean = trace.summary.get("time_mean")
    if mean is None:
        mean = float(np.mean(trace.channel("r")))
    bad = trace.bad or not np.isfinite(mean)
    if bad:
        return FeatureVector(np.zeros(1), np.ones(1), bad=True, names=("rate_mean",))
    return FeatureVector(np.array([mean]), np.zeros(1), bad=False, names=("rate_mean",))


# -- featurizer objects used by the inference loop ---------------------------


class HhFeaturizer:
    kind = "hh"

    def __init__(self, onset=60.0, include_latency=False):
        self.onset = onset
        self.include_latency = include_latency

    def __call__(self, trace):
        return hh_features(trace, onset=self.onset, include_latency=self.include_latency)


class GlmFeaturizer:
    kind = "glm"

    def __init__(self, simulator):
        self.design = simulator.design

    def __call__(self, y):
        return glm_features(y, self.design)


class GmFeaturizer:
    kind = "gm"

    def __call__(self, samples):
        return gm_features(samples)


class AutapseFeaturizer:
    kind = "autapse"

    def __call__(self, trace):
        return autapse_features(trace)


@dataclass
class FeatureStandardizer:
    """Per-feature z-scoring, fitted once on round-1 good simulations and
    frozen thereafter. Masked entries are excluded from the statistics."""

    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def fit(self, values, mask):
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        observed = mask == 0
        count = observed.sum(axis=0)
        filled = np.where(observed, values, 0.0)
        self.mean = np.where(count > 0, filled.sum(axis=0) / np.maximum(count, 1), 0.0)
        sq = np.where(observed, (filled - self.mean) ** 2, 0.0).sum(axis=0)
        std = np.sqrt(sq / np.maximum(count, 1))
        self.std = np.where((count > 1) & (std > 1e-8), std, 1.0)
        return self

    @property
    def fitted(self):
        return self.mean is not None

    def transform(self, values, mask=None):
        z = (np.asarray(values, dtype=np.float64) - self.mean) / self.std
        if mask is not None:
            z = np.where(np.asarray(mask) > 0, 0.0, z)
        return z


class GruFeaturizer:
    """Learned features: a 25-unit gated-recurrent layer over the(voltage,
    stimulus) trace, standardised and subsampled, with a many-to-one readout.

    This object prepares network inputs; the recurrent weights live inside
    the mixture network (frontend="gru") and train jointly with it.
    """

    kind = "gru"
    n_channels = 2

    def __init__(self, n_units=25, stride=40, v_center=-70.0, v_scale=25.0,
                 stim_scale=None):
        self.n_units = n_units
        self.stride = stride
        self.v_center = v_center
        self.v_scale = v_scale
        self.stim_scale = stim_scale

    def __call__(self, trace):
        """Standardised (T, 2) sequence; bad traces give a zero sequence."""
        v = trace.channel("V")[:: self.stride]
        stim = trace.stimulus[:: self.stride]
        scale = self.stim_scale or max(np.max(np.abs(stim)), 1.0)
        seq = np.column_stack([(v - self.v_center) / self.v_scale, stim / scale])
        if trace.bad or not np.all(np.isfinite(seq)):
            return FeatureVector(
                np.zeros_like(seq).ravel(), np.zeros(seq.size), bad=True
            )
        return FeatureVector(seq.ravel(), np.zeros(seq.size), bad=False)

    def sequence(self, fv):
        return fv.values.reshape(-1, self.n_channels)


def gru_forward(spec, values, layout, sequence):
    """Run the recurrent front end alone on one standardised sequence.

    `values` is the flat point-weight vector of a network with a GRU
    frontend; returns the final hidden state (the learned feature vector).
    Differentiable jointly with the rest of the network under the training
    loss; this entry point is for inspection and gradient tests.
    """
    from .mdn import _gru_scan

    leaf = values if isinstance(values, ad.Tensor) else ad.Tensor(values)
    names = [
        f"gru.{gate}.{part}"
        for gate in ("update", "reset", "cand")
        for part in ("Wx", "Wh", "b")
    ]
    weights = {n: slice_block(leaf, layout, n) for n in names}
    x = np.asarray(sequence, dtype=np.float64)[None]
    return _gru_scan(weights, x)
