"""Flat parameter storage, the loss-and-gradient contract, and Adam.

A trainable model is anything with a ``loss(values, batch, rng) -> Tensor``
method, where ``values`` is the tape leaf wrapping the model's flat parameter
vector. ``value_and_grad`` runs one forward/backward pass and is verified
against central finite differences for every model in the repo.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor
from .errors import NonFiniteLoss

__all__ = [
    "ParamStore",
    "GradReport",
    "AdamState",
    "value_and_grad",
    "finite_difference_gradient",
    "adam_step",
    "clip_global_norm",
]


@dataclass(frozen=True)
class ParamStore:
    """Flat float64 parameter vector with a named-slice layout.

    layout maps a block name to (offset, shape); blocks must tile the vector
    exactly, without gaps or overlap.
    """

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]]

    @classmethod
    def from_blocks(cls, blocks):
        """Build from an ordered mapping name -> array."""
        layout = {}
        parts = []
        offset = 0
        for name, arr in blocks.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout[name] = (offset, arr.shape)
            parts.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(parts) if parts else np.zeros(0)
        store = cls(values=values, layout=layout)
        store.validate()
        return store

    def validate(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ParamStore contains non-finite values")
        offsets = sorted(
            (off, off + int(np.prod(shape, dtype=int)))
            for off, shape in self.layout.values()
        )
        cursor = 0
        for start, end in offsets:
            if start != cursor:
                raise ValueError("ParamStore layout has a gap or overlap")
            cursor = end
        if cursor != self.values.size:
            raise ValueError("ParamStore layout does not cover the vector")

    @property
    def size(self):
        return self.values.size

    def block(self, name):
        """Read-only view of one named block, in its original shape."""
        offset, shape = self.layout[name]
        n = int(np.prod(shape, dtype=int))
        return self.values[offset : offset + n].reshape(shape)

    def with_values(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ValueError("replacement vector has wrong length")
        return replace(self, values=values)


@dataclass(frozen=True)
class GradReport:
    """Scalar loss and the gradient over the full flat parameter vector."""

    loss: float
    grad: np.ndarray


def value_and_grad(model, params, batch, rng):
    """Evaluate the model loss and its gradient at `params`.

    `rng` is a seed (int or SeedSequence); identical seeds give identical
    stochastic losses, which is what makes finite-difference verification of
    reparameterised objectives possible.

    Raises NonFiniteLoss if the forward pass produces NaN/Inf.
    """
    leaf = Tensor(params.values)
    loss = model.loss(leaf, batch, np.random.default_rng(rng))
    loss_value = float(loss.value)
    if not np.isfinite(loss_value):
        raise NonFiniteLoss(f"loss is {loss_value!r}")
    loss.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(params.values)
    return GradReport(loss=loss_value, grad=np.asarray(grad, dtype=np.float64))


def finite_difference_gradient(model, params, batch, rng, step=1e-5, indices=None):
    """Central-difference gradient oracle at `params`, same seed both sides.

    Returns a full-length vector; entries not in `indices` are zero when a
    subset is requested.
    """

    def loss_at(values):
        leaf = Tensor(values)
        return float(model.loss(leaf, batch, np.random.default_rng(rng)).value)

    base = params.values
    grad = np.zeros_like(base)
    if indices is None:
        indices = range(base.size)
    for i in indices:
        bumped = base.copy()
        bumped[i] = base[i] + step
        hi = loss_at(bumped)
        bumped[i] = base[i] - step
        lo = loss_at(bumped)
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class AdamState:
    """Adam moments plus hyperparameters (Kingma-Ba defaults)."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=np.zeros(n_params),
            v=np.zeros(n_params),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(state, params, grad):
    """One bias-corrected Adam update; returns (new_state, new_params)."""
    grad = np.asarray(grad, dtype=np.float64)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), params.with_values(values)


def clip_global_norm(grad, threshold):
    """Rescale `grad` so its Euclidean norm does not exceed `threshold`."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(grad))
    if norm <= threshold:
        return grad
    return grad * (threshold / norm)
