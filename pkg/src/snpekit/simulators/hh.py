"""Single-compartment Hodgkin-Huxley neuron with a slow K+ adaptation current.

Membrane equation (units: mV, ms, mS/cm^2, uA/cm^2, uF/cm^2):

    C_m dV/dt = g_leak (E_leak - V) + g_na m^3 h (E_na - V)
              + g_k n^4 (E_k - V) + g_m p (E_k - V) + I_inj(t) + noise

Gating kinetics follow the standard threshold-shifted cortical-neuron rate
functions (V_T sets the spike threshold); the slow gate p relaxes to a
sigmoidal steady state with a voltage-dependent time constant scaled by
tau_max. The two constants of the n-gate closing rate are exposed as the
parameters k_bn1 (prefactor, default 0.5) and k_bn2 (voltage scale, default
40 mV):

    beta_n(V) = k_bn1 * exp(-(V - V_T - 10) / k_bn2)

These rate functions are the model definition for this package. Parameters
enter in log-absolute form: theta_i = log|value_i| with signs fixed by the
model (reversal potentials E_leak, E_k and the threshold V_T are negative).

Integration is exponential Euler (gates first, then V) in lockstep across a
batch of parameter draws; intrinsic noise is white current noise with
per-draw seeded realisations.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .base import Trace

HH_PARAM_NAMES = (
    "g_leak",
    "g_na",
    "g_k",
    "g_m",
    "e_leak",
    "e_na",
    "e_k",
    "v_t",
    "noise_std",
    "k_bn1",
    "k_bn2",
    "tau_max",
)

# ground-truth parameters in natural units
HH_THETA_STAR = {
    "g_leak": 0.1,
    "g_na": 50.0,
    "g_k": 10.0,
    "g_m": 0.07,
    "e_leak": -70.0,
    "e_na": 53.0,
    "e_k": -107.0,
    "v_t": -60.0,
    "noise_std": 0.1,
    "k_bn1": 0.5,
    "k_bn2": 40.0,
    "tau_max": 600.0,
}

_SIGNS = np.array([1, 1, 1, 1, -1, 1, -1, -1, 1, 1, 1, 1], dtype=np.float64)


def theta_star_log():
    """Ground truth in the log-absolute inference space."""
    raw = np.array([HH_THETA_STAR[n] for n in HH_PARAM_NAMES])
    return np.log(np.abs(raw))


def from_log_space(theta_log):
    """Map log-absolute parameters back to natural units with model signs."""
    theta_log = np.atleast_2d(np.asarray(theta_log, dtype=np.float64))
    return _SIGNS * np.exp(theta_log)


@dataclass(frozen=True)
class HhSpec:
    duration: float = 240.0
    dt: float = 0.025
    stimulus_kind: str = "step"  # "step" | "colored-noise"
    amplitude: float = 3.0  # ~7 spikes at ground truth for the default step
    onset: float = 60.0
    offset: float = 210.0
    cm: float = 1.0
    v0: float = -70.0
    noise_tau: float = 3.0  # colored-noise correlation time
    stimulus_seed: int = 7  # freezes the colored-noise realisation
    v_divergence: float = 500.0

    def __post_init__(self):
        if self.dt <= 0 or self.duration <= self.dt:
            raise ValueError("need dt > 0 and duration > dt")
        if self.stimulus_kind not in ("step", "colored-noise"):
            raise ValueError(f"unknown stimulus {self.stimulus_kind!r}")

    @property
    def n_steps(self):
        return int(round(self.duration / self.dt))


def _exprel_ratio(x):
    """x / (e^x - 1) with the removable singularity at 0 filled in."""
    x = np.asarray(x, dtype=np.float64)
    small = np.abs(x) < 1e-9
    safe = np.where(small, 1.0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(small, 1.0 - x / 2.0, safe / np.expm1(safe))
    return out


def _gate_rates(v, v_t, k_bn1, k_bn2):
    u_m = v - v_t - 13.0
    alpha_m = 0.32 * 4.0 * _exprel_ratio(-u_m / 4.0)
    u_bm = v - v_t - 40.0
    beta_m = 0.28 * 5.0 * _exprel_ratio(u_bm / 5.0)
    alpha_h = 0.128 * np.exp(-(v - v_t - 17.0) / 18.0)
    beta_h = 4.0 / (1.0 + np.exp(-(v - v_t - 40.0) / 5.0))
    u_n = v - v_t - 15.0
    alpha_n = 0.032 * 5.0 * _exprel_ratio(-u_n / 5.0)
    beta_n = k_bn1 * np.exp(-(v - v_t - 10.0) / k_bn2)
    return alpha_m, beta_m, alpha_h, beta_h, alpha_n, beta_n


def _slow_gate(v, tau_max):
    p_inf = 1.0 / (1.0 + np.exp(-(v + 35.0) / 10.0))
    tau_p = tau_max / (3.3 * np.exp((v + 35.0) / 20.0) + np.exp(-(v + 35.0) / 20.0))
    return p_inf, tau_p


@lru_cache(maxsize=8)
def _stimulus_cached(spec):
    t = np.arange(spec.n_steps) * spec.dt
    window = ((t >= spec.onset) & (t < spec.offset)).astype(np.float64)
    if spec.stimulus_kind == "step":
        return spec.amplitude * window
    # Ornstein-Uhlenbeck fluctuation around a positive mean, frozen by seed
    rng = np.random.default_rng(spec.stimulus_seed)
    rho = np.exp(-spec.dt / spec.noise_tau)
    x = np.zeros(spec.n_steps)
    eta = rng.standard_normal(spec.n_steps)
    for i in range(1, spec.n_steps):
        x[i] = rho * x[i - 1] + np.sqrt(1.0 - rho * rho) * eta[i]
    return spec.amplitude * (0.5 + 0.5 * x) * window


class HodgkinHuxleySimulator:
    theta_names = HH_PARAM_NAMES

    def __init__(self, spec):
        self.spec = spec

    def stimulus(self):
        return _stimulus_cached(self.spec)

    def simulate(self, theta_log, seed):
        return self.simulate_batch([theta_log], [seed])[0]

    def simulate_batch(self, thetas_log, seeds, record_gates=False):
        spec = self.spec
        params = from_log_space(thetas_log)
        n = len(params)
        (g_leak, g_na, g_k, g_m, e_leak, e_na, e_k, v_t,
         noise_std, k_bn1, k_bn2, tau_max) = params.T

        n_steps = spec.n_steps
        dt = spec.dt
        stim = self.stimulus()

        noise = np.zeros((n, n_steps))
        for i, s in enumerate(seeds):
            if noise_std[i] > 0:
                noise[i] = np.random.default_rng(s).standard_normal(n_steps)
        noise_scale = noise_std / np.sqrt(dt)  # white current noise

        v = np.full(n, spec.v0)
        am, bm, ah, bh, an, bn = _gate_rates(v, v_t, k_bn1, k_bn2)
        m = am / (am + bm)
        h = ah / (ah + bh)
        ngate = an / (an + bn)
        p_inf, _ = _slow_gate(v, tau_max)
        p = p_inf.copy()

        def relax(x, alpha, beta):
            # exponential Euler keeps gates in [0, 1]: convex combination of
            # the current value and a steady state in [0, 1]
            tau = 1.0 / (alpha + beta)
            inf = alpha * tau
            return inf + (x - inf) * np.exp(-dt / tau)

        v_out = np.empty((n, n_steps))
        gates_out = {"m": [], "h": [], "n": [], "p": []} if record_gates else None
        bad = np.zeros(n, dtype=bool)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for k in range(n_steps):
                am, bm, ah, bh, an, bn = _gate_rates(v, v_t, k_bn1, k_bn2)
                m = relax(m, am, bm)
                h = relax(h, ah, bh)
                ngate = relax(ngate, an, bn)
                p_inf, tau_p = _slow_gate(v, tau_max)
                p = p_inf + (p - p_inf) * np.exp(-dt / tau_p)
                if record_gates:
                    for name, g in (("m", m), ("h", h), ("n", ngate), ("p", p)):
                        gates_out[name].append(g.copy())

                cond_na = g_na * m**3 * h
                cond_k = g_k * ngate**4 + g_m * p
                g_tot = g_leak + cond_na + cond_k
                drive = (
                    g_leak * e_leak
                    + cond_na * e_na
                    + cond_k * e_k
                    + stim[k]
                    + noise_scale * noise[:, k]
                )
                v_inf = drive / g_tot
                v = v_inf + (v - v_inf) * np.exp(-dt * g_tot / spec.cm)
                v_out[:, k] = v
                bad |= ~np.isfinite(v) | (np.abs(v) > spec.v_divergence)

        out = []
        for i in range(n):
            channels = {"V": v_out[i]}
            if record_gates:
                for name, series in gates_out.items():
                    channels[name] = np.array([s[i] for s in series])
            out.append(
                Trace(
                    dt=dt,
                    channels=channels,
                    stimulus=stim.copy(),
                    bad=bool(bad[i]),
                )
            )
        return out
