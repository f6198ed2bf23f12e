"""Config-driven experiment execution and artifact management.

An experiment is one declarative JSON document naming a simulator, prior,
feature set, observation convention, and inference method. Configs are
schema-validated before any simulation runs and unknown keys are rejected
with key-path (and, where possible, line) anchored messages. Every run
directory is self-describing: the config copy plus the manifest suffice to
reproduce it bit-for-bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import adaptive_metropolis, glm_smoothness_prior, rejection_abc, smc_abc
from .distributions import BoxUniform, GaussianMixture
from .errors import ConfigError, SnpekitError
from .features import (
    AutapseFeaturizer,
    GlmFeaturizer,
    GmFeaturizer,
    GruFeaturizer,
    HhFeaturizer,
)
from .guard import GuardClassifier, effective_prior_report
from .simulators import (
    AutapseSimulator,
    AutapseSpec,
    BernoulliGlmSimulator,
    GaussianMixtureSimulator,
    GlmSpec,
    GmSpec,
    HhSpec,
    HodgkinHuxleySimulator,
    read_trace_csv,
    write_trace_csv,
)
from .simulators.hh import HH_PARAM_NAMES, theta_star_log
from .snpe import CDELFI, SNPE, CalibrationKernel, SnpeConfig

__all__ = [
    "validate_config",
    "load_config",
    "preset_names",
    "get_preset",
    "run_experiment",
    "compare_runs",
    "eval_posterior_grid",
    "eval_posterior_points",
]


# ---------------------------------------------------------------------------
# schema validation
# ---------------------------------------------------------------------------

_TOP_KEYS = {"name", "seed", "simulator", "prior", "features", "observation", "method", "output"}

_SIMULATOR_KEYS = {
    "gm": {"variant", "alpha", "sigma1", "sigma2", "n_samples"},
    "glm": {"filter_dim", "n_bins", "input_seed"},
    "autapse": {
        "i_inj", "noise_std", "duration", "base_dt", "max_steps", "r0",
        "divergence_bound",
    },
    "hh": {
        "duration", "dt", "stimulus_kind", "amplitude", "onset", "offset",
        "cm", "v0", "noise_tau", "stimulus_seed", "v_divergence",
    },
}

_PRIOR_KEYS = {
    "box": {"lower", "upper"},
    "gaussian": {"mean", "cov"},
    "glm-smoothness": {"dim", "sigma", "ridge"},
    "hh-box": {"half_width_low", "half_width_high"},
}

_FEATURE_KEYS = {
    "gm": set(),
    "glm": set(),
    "autapse": set(),
    "hh": {"include_latency", "onset"},
    "gru": {"n_units", "stride", "v_center", "v_scale"},
}

_METHOD_KEYS = {
    "snpe": {
        "n_rounds", "n_per_round", "components", "hidden", "activation",
        "weight_prior_precision", "clip_threshold", "learning_rate", "epochs",
        "batch_size", "continuity_start_round", "kernel", "retain_all_rounds",
        "standardize_theta", "impute_missing", "use_effective_prior_weights",
        "sim_chunk", "guard",
    },
    "cdelfi": {
        "n_rounds", "n_per_round", "hidden", "activation", "clip_threshold",
        "learning_rate", "epochs", "batch_size", "standardize_theta",
        "impute_missing", "sim_chunk",
    },
    "mcmc": {"warmup", "n_samples", "n_chains"},
    "smc-abc": {"n_particles", "eps0", "decay", "budget", "min_acceptance"},
    "rejection-abc": {"epsilon", "n"},
}

_OBSERVATION_KEYS = {"theta_star", "seed", "raw", "import_trace"}


def _line_of(source_text, key):
    if not source_text:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(source_text.splitlines(), start=1):
        if needle in line:
            return i
    return None


def _fail(path, msg, source_text=None, key=None):
    line = _line_of(source_text, key or path.split(".")[-1])
    prefix = f"line {line}: " if line else ""
    raise ConfigError(f"{prefix}{path}: {msg}")


def _check_keys(section, allowed, path, source_text):
    for key in section:
        if key not in allowed:
            _fail(f"{path}.{key}", "unknown key", source_text, key)


def _need(section, key, path, source_text):
    if key not in section:
        _fail(path, f"missing required key {key!r}", source_text)
    return section[key]


def _positive(section, keys, path, source_text):
    for key in keys:
        if key in section and not (
            isinstance(section[key], (int, float)) and section[key] > 0
        ):
            _fail(f"{path}.{key}", "must be a positive number", source_text, key)


def validate_config(doc, source_text=None):
    """Validate a config document; returns it unchanged on success."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    _check_keys(doc, _TOP_KEYS, "config", source_text)
    for key in ("simulator", "prior", "features", "observation", "method"):
        section = _need(doc, key, f"config.{key}", source_text)
        if not isinstance(section, dict):
            _fail(f"config.{key}", "must be an object", source_text, key)

    if "seed" in doc and not isinstance(doc["seed"], int):
        _fail("config.seed", "must be an integer", source_text, "seed")

    sim = doc["simulator"]
    kind = _need(sim, "kind", "config.simulator.kind", source_text)
    if kind not in _SIMULATOR_KEYS:
        _fail("config.simulator.kind", f"unknown simulator {kind!r}", source_text, "kind")
    _check_keys(
        {k: v for k, v in sim.items() if k != "kind"},
        _SIMULATOR_KEYS[kind], "config.simulator", source_text,
    )
    if kind == "autapse":
        _positive(sim, ("duration", "base_dt", "divergence_bound"), "config.simulator", source_text)
        if "base_dt" in sim and "duration" in sim and sim["duration"] <= sim["base_dt"]:
            _fail("config.simulator.duration", "must exceed base_dt", source_text, "duration")
    if kind == "hh":
        _positive(sim, ("duration", "dt", "cm"), "config.simulator", source_text)

    prior = doc["prior"]
    pkind = _need(prior, "kind", "config.prior.kind", source_text)
    if pkind not in _PRIOR_KEYS:
        _fail("config.prior.kind", f"unknown prior {pkind!r}", source_text, "kind")
    _check_keys(
        {k: v for k, v in prior.items() if k != "kind"},
        _PRIOR_KEYS[pkind], "config.prior", source_text,
    )
    if pkind == "box":
        lo = _need(prior, "lower", "config.prior.lower", source_text)
        hi = _need(prior, "upper", "config.prior.upper", source_text)
        if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
            _fail("config.prior", "need lower < upper componentwise", source_text, "lower")

    feats = doc["features"]
    fkind = _need(feats, "kind", "config.features.kind", source_text)
    if fkind not in _FEATURE_KEYS:
        _fail("config.features.kind", f"unknown feature set {fkind!r}", source_text, "kind")
    _check_keys(
        {k: v for k, v in feats.items() if k != "kind"},
        _FEATURE_KEYS[fkind], "config.features", source_text,
    )

    obs = doc["observation"]
    _check_keys(obs, _OBSERVATION_KEYS, "config.observation", source_text)
    if not any(k in obs for k in ("theta_star", "raw", "import_trace")):
        _fail("config.observation", "need theta_star, raw, or import_trace", source_text)
    if "theta_star" in obs and "seed" not in obs:
        _fail("config.observation", "theta_star needs an observation seed", source_text, "theta_star")

    method = doc["method"]
    mkind = _need(method, "kind", "config.method.kind", source_text)
    if mkind not in _METHOD_KEYS:
        _fail("config.method.kind", f"unknown method {mkind!r}", source_text, "kind")
    _check_keys(
        {k: v for k, v in method.items() if k != "kind"},
        _METHOD_KEYS[mkind], "config.method", source_text,
    )
    if mkind in ("snpe", "cdelfi"):
        _positive(method, ("n_rounds", "n_per_round", "epochs", "batch_size"), "config.method", source_text)
    if mkind == "smc-abc":
        _positive(method, ("n_particles", "eps0", "budget"), "config.method", source_text)
    return doc


def load_config(path_or_preset):
    """Load a config from a JSON file path or a shipped preset name."""
    if path_or_preset in PRESETS:
        doc = json.loads(json.dumps(PRESETS[path_or_preset]))  # deep copy
        return validate_config(doc), None
    path = Path(path_or_preset)
    if not path.exists():
        raise ConfigError(
            f"{path_or_preset!r} is neither a preset ({', '.join(preset_names())}) "
            "nor a config file"
        )
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    return validate_config(doc, source_text=text), text


# ---------------------------------------------------------------------------
# presets mirroring the shipped experiments
# ---------------------------------------------------------------------------


def _hh_method(**overrides):
    base = {
        "kind": "snpe",
        "n_rounds": 5,
        "n_per_round": 5000,
        "components": 2,
        "hidden": [50, 50],
        "epochs": 500,
        "batch_size": 100,
        "continuity_start_round": 3,
    }
    base.update(overrides)
    return base


PRESETS = {
    "gm-common": {
        "name": "gm-common",
        "seed": 1000,
        "simulator": {
            "kind": "gm", "variant": "common-mean",
            "alpha": 0.5, "sigma1": 1.0, "sigma2": 0.1, "n_samples": 1,
        },
        "prior": {"kind": "box", "lower": [-10.0], "upper": [10.0]},
        "features": {"kind": "gm"},
        "observation": {"raw": [0.0]},
        "method": {
            "kind": "snpe", "n_rounds": 6, "n_per_round": 1000,
            "components": 2, "hidden": [50, 50], "epochs": 250,
            "batch_size": 100, "continuity_start_round": 2,
        },
    },
    "gm-common-cdelfi": {
        "name": "gm-common-cdelfi",
        "seed": 1000,
        "simulator": {
            "kind": "gm", "variant": "common-mean",
            "alpha": 0.5, "sigma1": 1.0, "sigma2": 0.1, "n_samples": 1,
        },
        "prior": {"kind": "box", "lower": [-10.0], "upper": [10.0]},
        "features": {"kind": "gm"},
        "observation": {"raw": [0.0]},
        "method": {
            "kind": "cdelfi", "n_rounds": 6, "n_per_round": 1000,
            "hidden": [50, 50], "epochs": 250, "batch_size": 100,
        },
    },
    "gm-bimodal": {
        "name": "gm-bimodal",
        "seed": 1001,
        "simulator": {
            "kind": "gm", "variant": "bimodal",
            "alpha": 0.5, "sigma1": 1.0, "sigma2": 0.1, "n_samples": 1,
        },
        "prior": {"kind": "box", "lower": [-10.0], "upper": [10.0]},
        "features": {"kind": "gm"},
        "observation": {"raw": [2.0]},
        "method": {
            "kind": "snpe", "n_rounds": 3, "n_per_round": 250,
            "components": [1, 1, 2], "hidden": [50, 50], "epochs": 250,
            "batch_size": 100, "continuity_start_round": 2,
        },
    },
    "glm10": {
        "name": "glm10",
        "seed": 1002,
        "simulator": {"kind": "glm", "filter_dim": 10, "n_bins": 100, "input_seed": 42},
        "prior": {"kind": "glm-smoothness", "dim": 10, "sigma": 2.0, "ridge": 0.3},
        "features": {"kind": "glm"},
        "observation": {
            "theta_star": [-0.6, 0.4, 1.4, 1.9, 1.6, 0.8, 0.0, -0.4, -0.35, -0.2],
            "seed": 4242,
        },
        "method": {
            "kind": "snpe", "n_rounds": 5, "n_per_round": 5000,
            "components": 1, "hidden": [50, 50], "epochs": 250,
            "batch_size": 100, "continuity_start_round": 3,
        },
    },
    "glm10-mcmc": {
        "name": "glm10-mcmc",
        "seed": 1002,
        "simulator": {"kind": "glm", "filter_dim": 10, "n_bins": 100, "input_seed": 42},
        "prior": {"kind": "glm-smoothness", "dim": 10, "sigma": 2.0, "ridge": 0.3},
        "features": {"kind": "glm"},
        "observation": {
            "theta_star": [-0.6, 0.4, 1.4, 1.9, 1.6, 0.8, 0.0, -0.4, -0.35, -0.2],
            "seed": 4242,
        },
        "method": {"kind": "mcmc", "warmup": 3000, "n_samples": 10000, "n_chains": 4},
    },
    "glm10-smc": {
        "name": "glm10-smc",
        "seed": 1002,
        "simulator": {"kind": "glm", "filter_dim": 10, "n_bins": 100, "input_seed": 42},
        "prior": {"kind": "glm-smoothness", "dim": 10, "sigma": 2.0, "ridge": 0.3},
        "features": {"kind": "glm"},
        "observation": {
            "theta_star": [-0.6, 0.4, 1.4, 1.9, 1.6, 0.8, 0.0, -0.4, -0.35, -0.2],
            "seed": 4242,
        },
        "method": {
            "kind": "smc-abc", "n_particles": 1000, "eps0": 15.0,
            "decay": 0.9, "budget": 25000, "min_acceptance": 0.01,
        },
    },
    "autapse": {
        "name": "autapse",
        "seed": 1003,
        "simulator": {
            "kind": "autapse", "i_inj": 1.0, "noise_std": 0.5,
            "duration": 100.0, "base_dt": 0.01, "max_steps": 50000,
            "divergence_bound": 100.0,
        },
        "prior": {"kind": "box", "lower": [0.0, -1.0], "upper": [2.0, 2.5]},
        "features": {"kind": "autapse"},
        "observation": {"theta_star": [0.75, 1.0], "seed": 777},
        "method": {
            "kind": "snpe", "n_rounds": 5, "n_per_round": 1000,
            "components": 1, "hidden": [50, 50], "epochs": 500,
            "batch_size": 100, "continuity_start_round": 3, "guard": True,
        },
    },
    "hh12": {
        "name": "hh12",
        "seed": 1004,
        "simulator": {
            "kind": "hh", "duration": 240.0, "dt": 0.025,
            "stimulus_kind": "step", "amplitude": 3.0, "onset": 60.0, "offset": 210.0,
        },
        "prior": {"kind": "hh-box"},
        "features": {"kind": "hh", "include_latency": False},
        "observation": {"theta_star": list(theta_star_log()), "seed": 2024},
        "method": _hh_method(),
    },
    "hh12-latency": {
        "name": "hh12-latency",
        "seed": 1005,
        "simulator": {
            "kind": "hh", "duration": 240.0, "dt": 0.025,
            "stimulus_kind": "step", "amplitude": 3.0, "onset": 60.0, "offset": 210.0,
        },
        "prior": {"kind": "hh-box"},
        "features": {"kind": "hh", "include_latency": True},
        "observation": {"theta_star": list(theta_star_log()), "seed": 2024},
        "method": _hh_method(n_rounds=2, n_per_round=500, epochs=200),
    },
    "hh12-gru": {
        "name": "hh12-gru",
        "seed": 1006,
        "simulator": {
            "kind": "hh", "duration": 240.0, "dt": 0.025,
            "stimulus_kind": "colored-noise", "amplitude": 6.0,
            "onset": 10.0, "offset": 240.0, "noise_tau": 3.0, "stimulus_seed": 7,
        },
        "prior": {"kind": "hh-box"},
        "features": {"kind": "gru", "n_units": 25, "stride": 40},
        "observation": {"theta_star": list(theta_star_log()), "seed": 2025},
        "method": _hh_method(
            n_rounds=2, n_per_round=500, components=1, epochs=100,
            batch_size=50, continuity_start_round=2,
        ),
    },
}


def preset_names():
    return sorted(PRESETS)


def get_preset(name):
    return json.loads(json.dumps(PRESETS[name]))


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def build_simulator(doc):
    sim = dict(doc["simulator"])
    kind = sim.pop("kind")
    if kind == "gm":
        return GaussianMixtureSimulator(GmSpec(**sim))
    if kind == "glm":
        return BernoulliGlmSimulator(GlmSpec(**sim))
    if kind == "autapse":
        return AutapseSimulator(AutapseSpec(**sim))
    if kind == "hh":
        return HodgkinHuxleySimulator(HhSpec(**sim))
    raise ConfigError(f"unknown simulator {kind!r}")


def build_prior(doc):
    prior = dict(doc["prior"])
    kind = prior.pop("kind")
    names = theta_names_for(doc)
    if kind == "box":
        return BoxUniform(np.array(prior["lower"]), np.array(prior["upper"]), dim_names=names)
    if kind == "gaussian":
        return GaussianMixture.single(np.array(prior["mean"]), np.array(prior["cov"]), dim_names=names)
    if kind == "glm-smoothness":
        gm = glm_smoothness_prior(
            prior.get("dim", 10), prior.get("sigma", 2.0), prior.get("ridge", 0.3)
        )
        return GaussianMixture(gm.weights, gm.means, gm.chols, dim_names=names)
    if kind == "hh-box":
        center = theta_star_log()
        lo = center + np.log(prior.get("half_width_low", 0.5))
        hi = center + np.log(prior.get("half_width_high", 1.5))
        return BoxUniform(lo, hi, dim_names=names)
    raise ConfigError(f"unknown prior {kind!r}")


def theta_names_for(doc):
    kind = doc["simulator"]["kind"]
    if kind == "gm":
        return ("theta",)
    if kind == "glm":
        d = doc["simulator"].get("filter_dim", 10)
        return tuple(f"beta{i}" for i in range(d))
    if kind == "autapse":
        return ("J", "tau")
    return HH_PARAM_NAMES


def build_featurizer(doc, simulator):
    feats = dict(doc["features"])
    kind = feats.pop("kind")
    if kind == "gm":
        return GmFeaturizer()
    if kind == "glm":
        return GlmFeaturizer(simulator)
    if kind == "autapse":
        return AutapseFeaturizer()
    if kind == "hh":
        onset = feats.get("onset", doc["simulator"].get("onset", 60.0))
        return HhFeaturizer(onset=onset, include_latency=feats.get("include_latency", False))
    if kind == "gru":
        amp = doc["simulator"].get("amplitude", 1.0)
        return GruFeaturizer(
            n_units=feats.get("n_units", 25),
            stride=feats.get("stride", 40),
            v_center=feats.get("v_center", -70.0),
            v_scale=feats.get("v_scale", 25.0),
            stim_scale=amp,
        )
    raise ConfigError(f"unknown feature set {kind!r}")


def build_snpe_config(method):
    method = dict(method)
    method.pop("kind")
    method.pop("guard", None)
    if "hidden" in method:
        method["hidden"] = tuple(method["hidden"])
    if "components" in method and isinstance(method["components"], list):
        method["components"] = tuple(method["components"])
    if "kernel" in method:
        method["kernel"] = CalibrationKernel.from_dict(method["kernel"])
    return SnpeConfig(**method)


def make_observation(doc, simulator):
    obs = doc["observation"]
    if "raw" in obs:
        return np.array(obs["raw"], dtype=np.float64), {"source": "inline"}
    if "import_trace" in obs:
        return read_trace_csv(obs["import_trace"]), {
            "source": "import", "path": obs["import_trace"],
        }
    theta_star = np.array(obs["theta_star"], dtype=np.float64)
    raw = simulator.simulate(theta_star, obs["seed"])
    return raw, {
        "source": "simulated",
        "theta_star": theta_star.tolist(),
        "seed": obs["seed"],
    }


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
    return path


def write_feature_table(path, thetas, values, masks, bads, theta_names, feature_names,
                        iw=None, kernel=None):
    """Versioned CSV: theta columns, feature values, mask bits, bad flag."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write("# snpekit feature table v1\n")
        writer = csv.writer(fh)
        header = (
            [f"theta_{n}" for n in theta_names]
            + [f"x_{n}" for n in feature_names]
            + [f"m_{n}" for n in feature_names]
            + ["bad"]
        )
        if iw is not None:
            header += ["iw", "kernel"]
        writer.writerow(header)
        for i in range(len(thetas)):
            row = (
                [repr(float(v)) for v in np.atleast_1d(thetas[i])]
                + [repr(float(v)) for v in values[i]]
                + [repr(float(v)) for v in masks[i]]
                + [repr(float(bads[i]))]
            )
            if iw is not None:
                row += [repr(float(iw[i])), repr(float(kernel[i]))]
            writer.writerow(row)
    return path


def read_feature_table(path):
    with Path(path).open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("# snpekit feature table"):
            raise ValueError(f"{path}: missing schema marker")
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    return header, rows


def write_samples_csv(path, samples, names, weights=None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + (["weight"] if weights is not None else []))
        for i, row in enumerate(samples):
            out = [repr(float(v)) for v in row]
            if weights is not None:
                out.append(repr(float(weights[i])))
            writer.writerow(out)
    return path


def read_samples_csv(path):
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    if header and header[-1] == "weight":
        return header[:-1], rows[:, :-1], rows[:, -1]
    return header, rows, None


class RoundArtifactWriter:
    """Per-round artifact sink handed to the sequential estimator."""

    def __init__(self, out_dir, theta_names, feature_names):
        self.out_dir = Path(out_dir)
        self.theta_names = theta_names
        self.feature_names = feature_names
        self.paths = []

    def __call__(self, round_index, posterior, diagnostics, table):
        r = round_index
        posterior_path = self.out_dir / f"posterior_round{r}.json"
        _atomic_write(posterior_path, posterior.to_json())
        diag_path = self.out_dir / f"diagnostics_round{r}.json"
        _atomic_write(diag_path, json.dumps(diagnostics, indent=2))
        names = self.feature_names
        if names is None or len(names) != table["x"].shape[1]:
            names = [str(i) for i in range(table["x"].shape[1])]
        table_path = write_feature_table(
            self.out_dir / f"simulations_round{r}.csv",
            table["theta"], table["x"], table["mask"], table["bad"],
            self.theta_names, names, iw=table["iw"], kernel=table["kernel"],
        )
        self.paths += [str(posterior_path), str(diag_path), str(table_path)]


# ---------------------------------------------------------------------------
# the runner
# ---------------------------------------------------------------------------


def run_experiment(doc, out_dir, seed=None, workers=1):
    """Execute one experiment config; returns the manifest dict.

    Artifacts land in `out_dir`; the manifest is written atomically at the
    end (with status "failed" and whatever partial artifacts exist if the
    method raised).
    """
    validate_config(doc)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = int(seed if seed is not None else doc.get("seed", 0))

    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    config_text = json.dumps(doc, indent=2, sort_keys=True)
    _atomic_write(out_dir / "config.json", config_text)

    manifest = {
        "name": doc.get("name", "experiment"),
        "snpekit_version": __version__,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": master,
        "workers": workers,
        "started": started.isoformat(),
        "status": "running",
        "artifacts": {"config": "config.json"},
        "seed_streams": {
            "scheme": "SeedSequence(master, spawn_key=(round, stream, draw))",
            "observation": doc["observation"].get("seed"),
        },
    }

    simulator = build_simulator(doc)
    prior = build_prior(doc)
    featurizer = build_featurizer(doc, simulator)
    theta_names = theta_names_for(doc)
    observed_raw, obs_info = make_observation(doc, simulator)
    manifest["observation"] = obs_info

    method = doc["method"]
    kind = method["kind"]
    error = None
    try:
        if kind == "snpe":
            _run_snpe(doc, out_dir, master, workers, simulator, prior,
                      featurizer, theta_names, observed_raw, manifest)
        elif kind == "cdelfi":
            _run_cdelfi(doc, out_dir, master, workers, simulator, prior,
                        featurizer, theta_names, observed_raw, manifest)
        elif kind == "mcmc":
            _run_mcmc(doc, out_dir, master, simulator, prior, theta_names,
                      observed_raw, manifest)
        elif kind == "smc-abc":
            _run_smc(doc, out_dir, master, workers, simulator, prior,
                     featurizer, theta_names, observed_raw, manifest)
        elif kind == "rejection-abc":
            _run_rejection(doc, out_dir, master, workers, simulator, prior,
                           featurizer, theta_names, observed_raw, manifest)
        manifest["status"] = "ok"
    except SnpekitError as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        error = exc
    finally:
        manifest["seconds"] = time.perf_counter() - t0
        manifest["finished"] = datetime.now(timezone.utc).isoformat()
        _atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2))
    if error is not None:
        raise error
    return manifest


def _finalize_posterior(out_dir, posterior, manifest):
    path = _atomic_write(out_dir / "posterior.json", posterior.to_json())
    manifest["artifacts"]["posterior"] = path.name


def _run_snpe(doc, out_dir, master, workers, simulator, prior, featurizer,
              theta_names, observed_raw, manifest):
    config = build_snpe_config(doc["method"])
    guard = GuardClassifier(seed=master) if doc["method"].get("guard") else None
    x_o_fv = featurizer(observed_raw)
    feature_names = list(x_o_fv.names) if x_o_fv.names else None
    writer = RoundArtifactWriter(out_dir, theta_names, feature_names)
    est = SNPE(
        simulator, prior, featurizer, config=config, guard=guard,
        seed=master, theta_names=theta_names, workers=workers,
        artifact_writer=writer,
    )
    est.fit(observed_raw)
    manifest["artifacts"]["rounds"] = writer.paths
    _finalize_posterior(out_dir, est.posterior_, manifest)
    est.model_.save(out_dir / "network.snpk")
    manifest["artifacts"]["network"] = "network.snpk"
    manifest["diagnostics"] = {
        "bad_fraction_per_round": [
            d["n_bad"] / d["n_simulations"] for d in est.diagnostics_
        ],
    }
    if guard is not None:
        guard.save(out_dir / "guard.snpk")
        manifest["artifacts"]["guard"] = "guard.snpk"
        grid = _guard_grid(prior)
        report = effective_prior_report(prior, guard, grid)
        path = write_samples_csv(
            out_dir / "effective_prior.csv",
            np.column_stack([grid, report]),
            list(theta_names) + ["effective_prior"],
        )
        manifest["artifacts"]["effective_prior"] = path.name


def _guard_grid(prior, per_dim=41):
    axes = [
        np.linspace(lo, hi, per_dim)
        for lo, hi in zip(prior.lower, prior.upper)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _run_cdelfi(doc, out_dir, master, workers, simulator, prior, featurizer,
                theta_names, observed_raw, manifest):
    config = build_snpe_config(doc["method"])
    est = CDELFI(
        simulator, prior, featurizer, config=config, seed=master,
        theta_names=theta_names, workers=workers,
    )
    paths = []
    try:
        est.fit(observed_raw)
    finally:
        for r, posterior in enumerate(getattr(est, "posteriors_", []), start=1):
            p = _atomic_write(out_dir / f"posterior_round{r}.json", posterior.to_json())
            paths.append(str(p))
        manifest["artifacts"]["rounds"] = paths
    _finalize_posterior(out_dir, est.posterior_, manifest)


def _glm_log_posterior(prior, simulator, y_o):
    def f(betas):
        betas = np.atleast_2d(betas)
        lp = np.atleast_1d(prior.log_pdf(betas))
        ll = np.array([simulator.log_likelihood(b, y_o) for b in betas])
        return lp + ll

    return f


def _run_mcmc(doc, out_dir, master, simulator, prior, theta_names,
              observed_raw, manifest):
    if doc["simulator"]["kind"] != "glm":
        raise ConfigError("the mcmc reference targets the GLM's exact likelihood")
    method = doc["method"]
    chain = adaptive_metropolis(
        _glm_log_posterior(prior, simulator, observed_raw),
        x0=prior.mean(),
        seed=master,
        n_chains=method.get("n_chains", 4),
        warmup=method.get("warmup", 3000),
        n_samples=method.get("n_samples", 10000),
    )
    flat = chain.flat()
    path = write_samples_csv(out_dir / "samples.csv", flat, theta_names)
    manifest["artifacts"]["samples"] = path.name
    manifest["mcmc"] = {
        "acceptance_rate": chain.acceptance_rate,
        "rhat_max": float(chain.rhat.max()),
    }
    posterior = GaussianMixture.single(
        flat.mean(axis=0), np.cov(flat.T), dim_names=theta_names
    )
    _finalize_posterior(out_dir, posterior, manifest)


def _run_smc(doc, out_dir, master, workers, simulator, prior, featurizer,
             theta_names, observed_raw, manifest):
    method = doc["method"]
    x_o_fv = featurizer(observed_raw)
    state = smc_abc(
        prior, simulator, featurizer, x_o_fv, seed=master,
        n_particles=method.get("n_particles", 1000),
        eps0=method.get("eps0", 15.0),
        decay=method.get("decay", 0.9),
        budget=method.get("budget", 25000),
        min_acceptance=method.get("min_acceptance", 0.01),
        workers=workers,
    )
    path = write_samples_csv(
        out_dir / "samples.csv", state.particles, theta_names, weights=state.weights
    )
    manifest["artifacts"]["samples"] = path.name
    manifest["smc"] = {
        "stages": state.history,
        "final_epsilon": state.epsilon,
        "n_simulations": state.n_simulations,
        "ess": state.ess,
    }
    _finalize_posterior(out_dir, state.moment_matched(theta_names), manifest)


def _run_rejection(doc, out_dir, master, workers, simulator, prior, featurizer,
                   theta_names, observed_raw, manifest):
    method = doc["method"]
    x_o_fv = featurizer(observed_raw)
    accepted, info = rejection_abc(
        prior, simulator, featurizer, x_o_fv,
        epsilon=method["epsilon"], n=method["n"], seed=master, workers=workers,
    )
    path = write_samples_csv(out_dir / "samples.csv", accepted, theta_names)
    manifest["artifacts"]["samples"] = path.name
    manifest["rejection"] = {
        "acceptance_rate": info["acceptance_rate"],
        "n_simulations": info["n_simulations"],
    }
    posterior = GaussianMixture.single(
        accepted.mean(axis=0),
        np.atleast_2d(np.cov(accepted.T)) + 1e-12 * np.eye(accepted.shape[1]),
        dim_names=theta_names,
    )
    _finalize_posterior(out_dir, posterior, manifest)


# ---------------------------------------------------------------------------
# comparison and evaluation
# ---------------------------------------------------------------------------


def _load_run(run_dir):
    run_dir = Path(run_dir)
    posterior = GaussianMixture.from_json((run_dir / "posterior.json").read_text())
    name = run_dir.name
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        name = json.loads(manifest_path.read_text()).get("name", name)
    samples = None
    weights = None
    samples_path = run_dir / "samples.csv"
    if samples_path.exists():
        _, samples, weights = read_samples_csv(samples_path)
    return {"name": name, "dir": str(run_dir), "posterior": posterior,
            "samples": samples, "weights": weights}


def compare_runs(run_dirs, out_dir, grid_points=40):
    """Method-agnostic posterior comparison tables.

    Writes summary.csv (per-dimension mean/sd per run), one covariance CSV
    per run, and a long-format grid of all pairwise 2-D marginals for
    contour plotting. Runs must agree on parameter dimension and names.
    """
    from .errors import IncompatibleRuns

    runs = [_load_run(d) for d in run_dirs]
    if len(runs) < 2:
        raise IncompatibleRuns("need at least two runs to compare")
    dims = {r["posterior"].dim for r in runs}
    if len(dims) != 1:
        raise IncompatibleRuns(f"parameter dimensions differ: {sorted(dims)}")
    names_set = {r["posterior"].dim_names for r in runs if r["posterior"].dim_names}
    if len(names_set) > 1:
        raise IncompatibleRuns(f"parameter names differ: {names_set}")
    d = dims.pop()
    dim_names = names_set.pop() if names_set else tuple(str(i) for i in range(d))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def moments(run):
        if run["samples"] is not None:
            s, w = run["samples"], run["weights"]
            if w is None:
                return s.mean(axis=0), s.std(axis=0), np.cov(s.T)
            w = w / w.sum()
            mu = w @ s
            diff = s - mu
            cov = (w[:, None] * diff).T @ diff
            return mu, np.sqrt(np.diag(cov)), cov
        post = run["posterior"]
        return post.mean(), post.marginal_std(), post.covariance()

    stats = {run["name"]: moments(run) for run in runs}

    with (out_dir / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "dimension", "mean", "sd"])
        for run in runs:
            mu, sd, _ = stats[run["name"]]
            for j, nm in enumerate(dim_names):
                writer.writerow([run["name"], nm, repr(float(mu[j])), repr(float(sd[j]))])

    for run in runs:
        _, _, cov = stats[run["name"]]
        with (out_dir / f"covariance_{run['name']}.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dimension"] + list(dim_names))
            for j, nm in enumerate(dim_names):
                writer.writerow([nm] + [repr(float(v)) for v in cov[j]])

    # pairwise 2-D marginal grids spanning +/- 3 sd of the union of runs
    with (out_dir / "marginals2d.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "dim_i", "dim_j", "theta_i", "theta_j", "density"])
        def axis_range(dim):
            lo = min(stats[r["name"]][0][dim] - 3 * stats[r["name"]][1][dim] for r in runs)
            hi = max(stats[r["name"]][0][dim] + 3 * stats[r["name"]][1][dim] for r in runs)
            return np.linspace(lo, hi, grid_points)

        for i in range(d):
            for j in range(i + 1, d):
                gi = axis_range(i)
                gj = axis_range(j)
                xx, yy = np.meshgrid(gi, gj, indexing="ij")
                pts = np.column_stack([xx.ravel(), yy.ravel()])
                for run in runs:
                    if run["samples"] is not None:
                        mu, _, cov = stats[run["name"]]
                        marg = GaussianMixture.single(
                            mu[[i, j]], cov[np.ix_([i, j], [i, j])]
                        )
                    else:
                        marg = run["posterior"].marginal([i, j])
                    dens = marg.pdf(pts)
                    for (ti, tj), dv in zip(pts, dens):
                        writer.writerow(
                            [run["name"], dim_names[i], dim_names[j],
                             repr(float(ti)), repr(float(tj)), repr(float(dv))]
                        )
    return out_dir


def eval_posterior_grid(posterior_path, axes):
    """Evaluate a stored posterior's log-density on a 1-D or 2-D grid.

    `axes` is a list of (lo, hi, n) per dimension of the grid; for posteriors
    of higher dimension the remaining coordinates are marginalised out.
    """
    posterior = GaussianMixture.from_json(Path(posterior_path).read_text())
    if len(axes) > posterior.dim:
        raise ValueError("grid has more axes than the posterior has dimensions")
    marg = posterior.marginal(list(range(len(axes)))) if len(axes) < posterior.dim else posterior
    grids = [np.linspace(lo, hi, int(n)) for lo, hi, n in axes]
    mesh = np.meshgrid(*grids, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    logd = marg.log_pdf(pts)
    return pts, np.atleast_1d(logd)


def eval_posterior_points(posterior_path, points):
    posterior = GaussianMixture.from_json(Path(posterior_path).read_text())
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.atleast_1d(posterior.log_pdf(points))
