import json
import logging
import os
import shutil

import numpy as np
import pytest

from dynlsm import cli
from dynlsm.ascgrid import read_asc
from dynlsm.cli import RunConfig, dump_toml, load_config, main
from dynlsm.errors import ConfigError, DivergenceError

FAST = [
    "--synth-nrows", "40",
    "--synth-ncols", "40",
    "--synth-deformation", "200",
    "--iterations", "20",
    "--n-trees", "15",
    "--n-permutations", "20",
    "--shap-instances", "5",
    "--shap-background", "5",
    "--n-repeats", "2",
    "--adapt-repeats", "2",
    "--adapt-l", "0,1,5",
    "--mlp-epochs", "5",
]
PIPELINE = ["featurize", "train", "map", "explain", "enhance", "eval"]


def snapshot(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "world"
    assert main(["synth", "--out-dir", str(root), "--log-level", "WARNING"] + FAST) == 0
    return root


def run(world, command, *extra):
    return main([command, "--config", str(world / "config.toml"), "--log-level", "WARNING", *extra])


@pytest.fixture(scope="module")
def pipeline(world):
    for c in PIPELINE:
        assert run(world, c) == 0, c
    return world / "run"


# --- configuration ------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = RunConfig(n_trees=7, hidden=(8, 4), breaks=(0.1, 0.3, 0.5, 0.9), first_order=True)
    (tmp_path / "c.toml").write_text(dump_toml(cfg))
    back = load_config(str(tmp_path / "c.toml"))
    assert back.public() == cfg.public()
    assert back.hash() == cfg.hash()
    assert back.base_dir == str(tmp_path)


def test_config_defaults_follow_paper_rates():
    cfg = RunConfig()
    assert cfg.inner_lr == 0.01 and cfg.outer_lr == 0.001
    assert cfg.rich_threshold == 50 and cfg.iterations == 3000


def test_unknown_key_and_bad_values(tmp_path):
    (tmp_path / "a.toml").write_text("n_tree = 5\n")
    with pytest.raises(ConfigError, match="n_tree"):
        load_config(str(tmp_path / "a.toml"))
    (tmp_path / "b.toml").write_text("n_trees = 'many'\n")
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "b.toml"))
    with pytest.raises(ConfigError):
        load_config(None, {"breaks": "0.5,0.4,0.6,0.8"})
    with pytest.raises(ConfigError):
        load_config(None, {"shap_mode": "fast"})
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.toml"))


def test_flags_override_file(tmp_path, monkeypatch):
    (tmp_path / "c.toml").write_text("n_trees = 5\nseed = 3\nlandslides = 'inv/ls.csv'\n")
    cfg = load_config(str(tmp_path / "c.toml"), {"n_trees": "9", "first_order": True, "adapt_L": "1,2"})
    assert cfg.n_trees == 9 and cfg.seed == 3 and cfg.first_order and cfg.adapt_L == (1, 2)
    assert cfg.path("landslides") == str(tmp_path / "inv" / "ls.csv")
    monkeypatch.chdir(tmp_path)
    cfg = load_config(None, {"stations": "here.csv"})
    assert os.path.abspath(cfg.path("stations")) == str(tmp_path / "here.csv")


def test_env_var_default_config(tmp_path, monkeypatch):
    (tmp_path / "c.toml").write_text("n_tree = 5\n")
    monkeypatch.setenv(cli.CONFIG_ENV, str(tmp_path / "c.toml"))
    assert main(["train", "--log-level", "ERROR"]) == 2


def test_every_key_has_a_flag():
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices["train"]
    dests = {a.dest for a in sub._actions}
    assert {f.name for f in cli.config_fields()} <= dests


# --- pipeline ----------------------------------------------------------------------


def test_synth_writes_runnable_config(world):
    cfg = load_config(str(world / "config.toml"))
    assert cfg.out_dir == "run" and cfg.iterations == 20
    assert os.path.exists(cfg.path("landslides"))


def test_pipeline_outputs(pipeline):
    for sub in ("featurize", "models", "maps", "explain", "enhance", "eval"):
        m = json.loads((pipeline / sub / "manifest.json").read_text())
        assert m["config_hash"] and m["versions"]["dynlsm"] and m["seeds"]["seed"] == 0
        assert "time" not in json.dumps(m).lower()


def test_train_manifest_lists_both_kinds(pipeline):
    routing = json.loads((pipeline / "models" / "routing.json").read_text())["years"]
    routes = {r["route"] for r in routing.values()}
    assert routes == {"forest", "fewshot"}
    for r in routing.values():
        assert os.path.exists(pipeline / "models" / r["model"])
        assert (r["route"] == "forest") == (r["n_positive"] >= 50)


def test_featurize_counts_match_inventory(world, pipeline):
    from dynlsm.featurize import read_landslides_csv
    from collections import Counter

    inv = Counter(y for y, _, _ in read_landslides_csv(world / "landslides.csv"))
    m = json.loads((pipeline / "featurize" / "manifest.json").read_text())["details"]
    assert {int(y): c["positive"] for y, c in m["per_year"].items()} == dict(inv)
    assert all(c["negative"] == c["positive"] for c in m["per_year"].values())


def test_maps_valid_probabilities(pipeline):
    g, prob = read_asc(pipeline / "maps" / "prob_2000.asc")
    _, level = read_asc(pipeline / "maps" / "level_2000.asc")
    assert np.all((prob >= 0) & (prob <= 1))
    assert np.isfinite(prob).sum() == 1600
    assert set(np.unique(level)) <= {0, 1, 2, 3, 4}


def test_explain_and_enhance_outputs(pipeline):
    lines = (pipeline / "explain" / "trajectory.csv").read_text().splitlines()
    assert lines[0].startswith("year,n_positive,confidence,status,rank_1")
    assert len(lines) == 9
    m = json.loads((pipeline / "enhance" / "manifest.json").read_text())["details"]
    for y in m["years"]:
        assert abs(sum(y["initial"]) - 1) < 1e-12 and abs(sum(y["enhanced"]) - 1) < 1e-12
        assert y["high_enhanced"] >= y["high_initial"]


def test_eval_table(pipeline):
    table = json.loads((pipeline / "eval" / "table.json").read_text())
    for model in ("forest", "mlp"):
        row = table["overall"][model]
        assert 0 <= row["auroc"]["mean"] <= 1
        assert set(row) == {"accuracy", "precision", "recall", "f1", "auroc"}
    assert (pipeline / "eval" / "adaptation" / "adaptation.csv").exists()


def test_rerun_byte_identical(world, pipeline, tmp_path):
    copy = tmp_path / "world"
    shutil.copytree(world, copy, ignore=shutil.ignore_patterns("run"))
    for c in PIPELINE:
        assert run(copy, c) == 0
    assert snapshot(copy / "run") == snapshot(pipeline)


def test_threads_do_not_change_outputs(world, pipeline, tmp_path):
    copy = tmp_path / "world"
    shutil.copytree(world, copy, ignore=shutil.ignore_patterns("run"))
    for c in ("featurize", "train", "map", "explain"):
        assert run(copy, c, "--threads", "3") == 0
    a, b = snapshot(copy / "run"), snapshot(pipeline)
    for name in a:
        if name.endswith(".asc") or name.endswith(".csv") or name.endswith("routing.json"):
            assert a[name] == b[name], name


def test_single_year_map(world, tmp_path):
    copy = tmp_path / "world"
    shutil.copytree(world, copy)
    assert run(copy, "map", "--year", "2002") == 0
    assert run(copy, "map", "--year", "1990") == 2
    assert run(copy, "map", "--year", "soon") == 2


# --- error exits ---------------------------------------------------------------------


def test_empty_landslide_csv(world, tmp_path):
    copy = tmp_path / "world"
    shutil.copytree(world, copy, ignore=shutil.ignore_patterns("run"))
    (copy / "landslides.csv").write_text("year,easting,northing\n")
    assert run(copy, "featurize") == 3


def test_missing_layer_named(world, tmp_path, caplog):
    copy = tmp_path / "world"
    shutil.copytree(world, copy, ignore=shutil.ignore_patterns("run"))
    os.remove(copy / "rasters" / "twi.asc")
    with caplog.at_level(logging.ERROR):
        assert run(copy, "featurize") == 2
    assert "twi" in caplog.text


def test_commands_need_inputs(tmp_path):
    (tmp_path / "c.toml").write_text("")
    assert main(["train", "--config", str(tmp_path / "c.toml"), "--log-level", "ERROR"]) == 2
    assert main(["map", "--config", str(tmp_path / "c.toml"), "--log-level", "ERROR"]) == 2


def _samples_only(world, tmp_path, years):
    from dynlsm.data_model import read_samples_csv, write_samples_csv

    samples = [s for s in read_samples_csv(world / "truth_samples.csv") if s.year in years]
    write_samples_csv(samples, tmp_path / "s.csv")
    return ["--config", str(world / "config.toml"), "--samples", str(tmp_path / "s.csv"), "--out-dir", str(tmp_path / "out"), "--log-level", "ERROR"]


def test_rich_only_trains_forests_only(world, tmp_path):
    assert main(["train"] + _samples_only(world, tmp_path, {2000, 2001})) == 0
    files = sorted(os.listdir(tmp_path / "out" / "models"))
    assert files == ["forest_2000.json", "forest_2001.json", "manifest.json", "routing.json"]


def test_scarce_only_is_a_data_error(world, tmp_path):
    assert main(["train"] + _samples_only(world, tmp_path, {2002, 2006})) == 3


def test_eval_on_external_samples(world, tmp_path):
    args = _samples_only(world, tmp_path, {2000, 2001, 2002})
    assert main(["eval"] + args) == 0
    table = json.loads((tmp_path / "out" / "eval" / "table.json").read_text())
    assert table["overall"]["forest"]["f1"]["mean"] is not None


def test_divergence_exit_code(world, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceError("meta-training diverged")

    monkeypatch.setattr(cli, "meta_train", boom)
    assert main(["train"] + _samples_only(world, tmp_path, {2000, 2002})) == 4
