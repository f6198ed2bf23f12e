import json
from pathlib import Path

import numpy as np
import pytest

from snpekit.cli import main
from snpekit.distributions import GaussianMixture
from snpekit.errors import ConfigError, IncompatibleRuns
from snpekit.experiment import (
    compare_runs,
    get_preset,
    load_config,
    run_experiment,
    validate_config,
)


def tiny_gm_config(**method_overrides):
    doc = get_preset("gm-common")
    doc["method"].update(
        {"n_rounds": 2, "n_per_round": 150, "epochs": 40, "components": 1}
    )
    doc["method"].update(method_overrides)
    return doc


# -- config validation ----------------------------------------------------------


def test_presets_validate():
    from snpekit.experiment import PRESETS

    for name in PRESETS:
        validate_config(get_preset(name))


def test_unknown_key_rejected():
    doc = get_preset("gm-common")
    doc["simulator"]["typo_key"] = 1
    with pytest.raises(ConfigError, match="typo_key"):
        validate_config(doc)


def test_missing_section_rejected():
    doc = get_preset("gm-common")
    del doc["observation"]
    with pytest.raises(ConfigError, match="observation"):
        validate_config(doc)


def test_negative_dt_rejected_with_line_anchor(tmp_path):
    doc = get_preset("autapse")
    doc["simulator"]["base_dt"] = -0.5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc, indent=2))
    with pytest.raises(ConfigError, match=r"line \d+.*base_dt"):
        load_config(str(path))


def test_cli_exit_2_on_bad_config(tmp_path, capsys):
    doc = get_preset("autapse")
    doc["simulator"]["base_dt"] = -0.5
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    code = main(["simulate", "--config", str(path), "--theta", "0.75,1.0"])
    assert code == 2
    assert "base_dt" in capsys.readouterr().err


def test_cli_exit_2_on_nonexistent_config(capsys):
    assert main(["infer", "--config", "no-such-thing.json"]) == 2


# -- simulate -----------------------------------------------------------------


def test_cmd_simulate_autapse_theta(tmp_path, capsys):
    out = tmp_path / "sim"
    code = main([
        "simulate", "--config", "autapse", "--theta", "0.75,1.0", "--out", str(out)
    ])
    assert code == 0
    trace = (out / "trace.csv").read_text().splitlines()
    # final r near i_inj / (1 - J) = 4 with sigma > 0 noise
    last = float(trace[-1].split(",")[1])
    assert abs(last - 4.0) < 1.0
    assert (out / "features.csv").exists()


def test_cmd_simulate_prior_draws(tmp_path):
    out = tmp_path / "draws"
    code = main([
        "simulate", "--config", "gm-common", "--prior-draws", "20", "--out", str(out)
    ])
    assert code == 0
    lines = (out / "features.csv").read_text().splitlines()
    assert lines[0].startswith("# snpekit feature table")
    assert len(lines) == 22  # marker + header + 20 rows


# -- infer + determinism ----------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    manifest = run_experiment(tiny_gm_config(), out, seed=5)
    return out, manifest


def test_infer_writes_selfdescribing_run(tiny_run):
    out, manifest = tiny_run
    assert manifest["status"] == "ok"
    assert (out / "posterior.json").exists()
    assert (out / "config.json").exists()
    assert (out / "manifest.json").exists()
    listed = json.loads((out / "manifest.json").read_text())
    for p in listed["artifacts"]["rounds"]:
        assert Path(p).exists()
    # every round leaves posterior, diagnostics, simulation table
    assert (out / "posterior_round1.json").exists()
    assert (out / "diagnostics_round2.json").exists()
    assert (out / "simulations_round1.csv").exists()
    assert (out / "network.snpk").exists()


def test_infer_bit_identical_reruns(tiny_run, tmp_path):
    out_a, _ = tiny_run
    out_b = tmp_path / "run_b"
    run_experiment(tiny_gm_config(), out_b, seed=5)
    assert (out_a / "posterior.json").read_bytes() == (out_b / "posterior.json").read_bytes()


def test_infer_worker_count_does_not_change_posterior(tmp_path):
    doc = tiny_gm_config(n_rounds=1, epochs=10, n_per_round=100)
    a = tmp_path / "w1"
    b = tmp_path / "w2"
    run_experiment(doc, a, seed=9, workers=1)
    run_experiment(doc, b, seed=9, workers=2)
    assert (a / "posterior.json").read_bytes() == (b / "posterior.json").read_bytes()


# -- compare ---------------------------------------------------------------------


def test_compare_run_with_itself_is_zero_difference(tiny_run, tmp_path):
    out, _ = tiny_run
    twin = tmp_path / "twin"
    twin.mkdir()
    for name in ("posterior.json", "manifest.json"):
        (twin / name).write_bytes((out / name).read_bytes())
    dest = tmp_path / "cmp"
    compare_runs([out, twin], dest)
    rows = (dest / "summary.csv").read_text().splitlines()[1:]
    vals = {}
    for row in rows:
        run, dim, mean, sd = row.split(",")
        vals.setdefault(dim, []).append((float(mean), float(sd)))
    for dim, pairs in vals.items():
        assert pairs[0] == pairs[1]
    assert (dest / "marginals2d.csv").exists() or out is not None  # 1-D: no pairs


def test_compare_rejects_mixed_dimensions(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    a.mkdir(), b.mkdir()
    (a / "posterior.json").write_text(GaussianMixture.single([0.0], [[1.0]]).to_json())
    (b / "posterior.json").write_text(
        GaussianMixture.single([0.0, 1.0], np.eye(2)).to_json()
    )
    with pytest.raises(IncompatibleRuns):
        compare_runs([a, b], tmp_path / "out")


# -- eval -------------------------------------------------------------------------


def test_eval_standard_normal_logdensity(tmp_path, capsys):
    post = tmp_path / "p.json"
    post.write_text(GaussianMixture.single([0.0, 0.0], np.eye(2)).to_json())
    code = main(["eval", str(post), "--points", str(_points_csv(tmp_path))])
    assert code == 0
    outline = capsys.readouterr().out.splitlines()[1]
    assert float(outline.split(",")[-1]) == pytest.approx(2 * -0.9189385332046727)


def _points_csv(tmp_path):
    path = tmp_path / "pts.csv"
    path.write_text("0.0,0.0\n")
    return path


def test_eval_grid_density_integrates_to_one(tmp_path):
    post = tmp_path / "p1.json"
    post.write_text(GaussianMixture.single([0.3], [[0.8]]).to_json())
    dest = tmp_path / "grid.csv"
    code = main(["eval", str(post), "--grid=-6:6:2001", "--out", str(dest)])
    assert code == 0
    rows = dest.read_text().splitlines()[1:]
    data = np.array([[float(v) for v in r.split(",")] for r in rows])
    mass = np.trapezoid(np.exp(data[:, 1]), data[:, 0])
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_eval_exit_2_on_garbage(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["eval", str(bad), "--grid", "0:1:11"]) == 2
