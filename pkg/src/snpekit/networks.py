"""Low-level building blocks shared by the trainable networks.

Parameters live in a flat ParamStore; these helpers slice named blocks off
the tape leaf and apply dense layers in point form or with the pre-activation
(local) reparameterisation used for mean-field Gaussian weights.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}

_VAR_FLOOR = 1e-32  # keeps sqrt differentiable when activations are exactly 0


def init_weight(rng, shape):
    """Scaled-uniform fan-in initialisation for a weight matrix or vector."""
    if len(shape) == 1:
        return np.zeros(shape)
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def slice_block(leaf, layout, name):
    """Tape view of one named block of the flat parameter vector."""
    offset, shape = layout[name]
    n = int(np.prod(shape, dtype=int))
    t = leaf[offset : offset + n]
    return ad.reshape(t, shape) if len(shape) > 1 else t


def dense(h, weight, bias):
    return ad.matmul(h, weight) + bias


def dense_reparam(h, w_mean, b_mean, w_std, b_std, eps):
    """Dense layer with weights integrated out to pre-activation Gaussians.

    Sampling the pre-activation a ~ N(h @ Wm + bm, h^2 @ Ws^2 + bs^2) gives an
    unbiased pathwise estimate with one noise draw `eps` per output unit.
    """
    mean = ad.matmul(h, w_mean) + b_mean
    var = ad.matmul(ad.square(h), ad.square(w_std)) + ad.square(b_std)
    return mean + ad.sqrt(var + _VAR_FLOOR) * eps
