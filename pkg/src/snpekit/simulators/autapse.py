"""Self-coupled linear rate neuron: tau dr/dt = (J - 1) r + I + sigma eta.

The deterministic system is stable iff (J - 1)/tau < 0, so for positive time
constants divergence sets in at self-connection strengths J > 1. Divergence is
recorded on the output as data (bad flag), never raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import Trace

_STORED_POINTS = 2001  # traces are subsampled for storage; summaries are exact


@dataclass(frozen=True)
class AutapseSpec:
    i_inj: float = 1.0
    noise_std: float = 0.5
    duration: float = 100.0
    base_dt: float = 0.01  # actual dt is base_dt * min(1, |tau|), step-capped
    max_steps: int = 50_000
    r0: float = 0.0
    divergence_bound: float = 100.0

    def __post_init__(self):
        if self.base_dt <= 0 or self.duration <= self.base_dt:
            raise ValueError("need base_dt > 0 and duration > base_dt")

    def step_size(self, tau):
        dt = self.base_dt * min(1.0, abs(tau))
        min_dt = self.duration / self.max_steps
        return max(dt, min_dt)


class AutapseSimulator:
    theta_names = ("J", "tau")

    def __init__(self, spec):
        self.spec = spec

    def simulate(self, theta, seed):
        return self.simulate_batch([theta], [seed])[0]

    def simulate_batch(self, thetas, seeds):
        """Euler-Maruyama in lockstep over the batch (per-draw dt and noise)."""
        spec = self.spec
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        n = len(thetas)
        J, tau = thetas[:, 0], thetas[:, 1]

        with np.errstate(divide="ignore", invalid="ignore"):
            dt = np.array([spec.step_size(t) for t in tau])
            steps = np.minimum(
                np.ceil(spec.duration / dt).astype(int), spec.max_steps
            )
            decay = 1.0 + dt * (J - 1.0) / tau
            drive = dt * spec.i_inj / tau
            kick = spec.noise_std * np.sqrt(dt) / tau
        max_steps = int(steps.max())

        noise = np.zeros((n, max_steps))
        if spec.noise_std > 0:
            for i, s in enumerate(seeds):
                noise[i, : steps[i]] = np.random.default_rng(s).standard_normal(steps[i])

        # per-draw storage stride, so output is identical for any batching
        stride = np.maximum(1, np.ceil(steps / (_STORED_POINTS - 1)).astype(int))
        n_store = steps // stride + 1
        store = np.full((n, int(n_store.max())), np.nan)
        store[:, 0] = spec.r0
        store_idx = np.ones(n, dtype=int)

        r = np.full(n, spec.r0)
        running_sum = np.zeros(n)
        bad = np.zeros(n, dtype=bool)
        with np.errstate(over="ignore", invalid="ignore"):
            for k in range(max_steps):
                step_now = k < steps
                r_next = decay * r + drive + kick * noise[:, k]
                r = np.where(step_now, r_next, r)
                running_sum += np.where(step_now, r, 0.0)
                bad |= (~np.isfinite(r) | (np.abs(r) > spec.divergence_bound)) & step_now
                hit = ((k + 1) % stride == 0) & step_now
                if hit.any():
                    rows = np.nonzero(hit)[0]
                    store[rows, store_idx[rows]] = r[rows]
                    store_idx[rows] += 1

        out = []
        for i in range(n):
            mean_r = running_sum[i] / steps[i]
            r_i = store[i, : store_idx[i]]
            trace = Trace(
                dt=float(dt[i] * stride[i]),
                channels={"r": r_i},
                stimulus=np.full(r_i.size, spec.i_inj),
                bad=bool(bad[i]),
                summary={
                    "time_mean": float(mean_r) if np.isfinite(mean_r) else np.nan,
                    "final": float(r_i[-1]),
                },
            )
            out.append(trace)
        return out
