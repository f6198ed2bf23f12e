"""Forward simulators mapping (theta, seed) deterministically to raw output."""

from .base import Trace, read_trace_csv, write_trace_csv
from .gm import GmSpec, GaussianMixtureSimulator
from .glm import GlmSpec, BernoulliGlmSimulator
from .autapse import AutapseSpec, AutapseSimulator
from .hh import HH_THETA_STAR, HhSpec, HodgkinHuxleySimulator

__all__ = [
    "Trace",
    "read_trace_csv",
    "write_trace_csv",
    "GmSpec",
    "GaussianMixtureSimulator",
    "GlmSpec",
    "BernoulliGlmSimulator",
    "AutapseSpec",
    "AutapseSimulator",
    "HhSpec",
    "HodgkinHuxleySimulator",
    "HH_THETA_STAR",
]
