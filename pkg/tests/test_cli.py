import csv
import json

import pytest

from zenith.cli import dispatch, resolve_seed, sha256_file

TINY_DATA = {"n_train": 600, "n_test": 200, "seed": 3, "truth_seed": 1, "bayes_samples": 2000,
             "probe_size": 64}
TINY_MODEL = {"variant": "zenith", "layers": 3, "T": 8, "D": 4, "k": 4, "r": 4, "head_hidden": 8,
              "proj_hidden": 0}
TINY_TRAIN = {"total_steps": 8, "warmup_steps": 2, "batch_size": 32}


def write_cfg(tmp_path, name="cfg.json", **sections):
    doc = {"model": TINY_MODEL, "train": TINY_TRAIN, "data": TINY_DATA}
    doc.update(sections)
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def run(*argv):
    return dispatch([str(a) for a in argv])


def test_unknown_subcommand_is_usage_error(capsys):
    assert run("frobnicate") == 1
    assert "usage" in capsys.readouterr().err


def test_missing_config_is_usage_error(tmp_path):
    assert run("train", "--out", tmp_path) == 1
    assert run("count") == 1


def test_bad_heads_exit_2_naming_constraint(tmp_path, capsys):
    cfg = write_cfg(tmp_path, model={"variant": "zenith_pp", "T": 8, "D": 16, "heads": 3})
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "must divide D" in capsys.readouterr().err


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, train={**TINY_TRAIN, "learning_rate": 0.1})
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "learning_rate" in capsys.readouterr().err
    cfg = write_cfg(tmp_path, extras={})
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2


def test_runtime_failure_exit_3(tmp_path):
    cfg = write_cfg(tmp_path, data={**TINY_DATA, "train_path": "missing.csv"})
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 3


def test_count_inline_prints_report(capsys):
    doc = {"model": {"variant": "zenith", "layers": 1, "T": 4, "D": 512, "k": 512, "t_hat": 4, "r": 512}}
    assert run("count", "--inline", json.dumps(doc)) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["appendix_params"] == 3_670_016


def test_count_with_out_writes_report_and_manifest(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert run("count", "--config", cfg, "--out", tmp_path / "c") == 0
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert m["status"] == "ok"
    assert m["artifacts"]["cost_report.json"] == sha256_file(tmp_path / "c" / "cost_report.json")


def test_gen_data_is_reproducible(tmp_path):
    cfg = write_cfg(tmp_path)
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a" / "d.csv") == 0
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "b" / "d.csv") == 0
    for name in ("d.csv", "d.json", "d_test.csv"):
        assert sha256_file(tmp_path / "a" / name) == sha256_file(tmp_path / "b" / name)
    m = json.loads((tmp_path / "a" / "d.manifest.json").read_text())
    assert m["artifacts"]["d.csv"] == sha256_file(tmp_path / "a" / "d.csv")


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("ZENITH_SEED", raising=False)
    assert resolve_seed(None, 4) == 4
    monkeypatch.setenv("ZENITH_SEED", "9")
    assert resolve_seed(None, 4) == 9
    assert resolve_seed(2, 4) == 2


def test_env_seed_changes_data(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv("ZENITH_SEED", "11")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a") == 0
    monkeypatch.delenv("ZENITH_SEED")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 11
    assert sha256_file(tmp_path / "a" / "train.csv") != sha256_file(tmp_path / "b" / "train.csv")


def test_train_eval_probe_pipeline(tmp_path, capsys):
    assert run("gen-data", "--config", write_cfg(tmp_path), "--out", tmp_path / "data") == 0
    data = {**TINY_DATA, "train_path": "data/train.csv", "test_path": "data/test.csv"}
    cfg = write_cfg(tmp_path, name="run.json", data=data)
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", out, "--steps", 5) == 0
    for name in ("model.znth", "train_log.csv", "eval.json", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["train"]["total_steps"] == 5
    for name, digest in manifest["artifacts"].items():
        assert sha256_file(out / name) == digest
    assert len((out / "train_log.csv").read_text().splitlines()) == 6

    assert run("eval", "--config", cfg, "--out", tmp_path / "ev", "--checkpoint", out / "model.znth") == 0
    rep = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert rep["n_examples"] == 200 and len(rep["token_similarity"]) == 3

    assert run("probe-sim", "--config", cfg, "--out", tmp_path / "pr", "--checkpoint",
               out / "model.znth", "--layer", 3) == 0
    rows = list(csv.reader(open(tmp_path / "pr" / "similarity_layer3.csv")))
    assert len(rows) == 9 and len(rows[0]) == 9
    assert run("probe-sim", "--config", cfg, "--out", tmp_path / "pr2", "--checkpoint",
               out / "model.znth", "--layer", 4) == 3


def test_train_outputs_are_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, model={**TINY_MODEL, "variant": "zenith_pp", "heads": 2, "E_s": 3, "E_a": 2})
    for d in ("x", "y"):
        assert run("train", "--config", cfg, "--out", tmp_path / d) == 0
    mx = json.loads((tmp_path / "x" / "manifest.json").read_text())["artifacts"]
    my = json.loads((tmp_path / "y" / "manifest.json").read_text())["artifacts"]
    assert mx == my
    assert "router_loads.csv" in mx


def test_sweep_sorted_with_relative_logloss(tmp_path):
    grid = [{"name": "big", "D": 8, "k": 8, "r": 8},
            {"name": "small"},
            {"name": "pp", "variant": "zenith_pp", "heads": 2, "E_s": 3, "E_a": 1},
            {"name": "broken", "variant": "zenith_pp", "heads": 3}]
    cfg = write_cfg(tmp_path, grid=grid)
    # invalid grid entries are rejected up front
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s") == 2
    cfg = write_cfg(tmp_path, grid=grid[:3])
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s", "--steps", 3) == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "sweep.csv")))
    params = [int(r["params"]) for r in rows]
    assert params == sorted(params)
    big = next(r for r in rows if r["name"] == "big")
    assert float(big["relative_logloss_pct"]) == 0.0
    pp = next(r for r in rows if r["name"] == "pp")
    assert int(pp["activated_params"]) < int(pp["params"])


def test_sweep_single_config_and_parallel(tmp_path):
    cfg = write_cfg(tmp_path, grid=[{"name": "only"}])
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s1", "--steps", 3) == 0
    assert run("sweep", "--config", cfg, "--out", tmp_path / "s2", "--steps", 3, "--parallel", 2) == 0
    rows = list(csv.DictReader(open(tmp_path / "s1" / "sweep.csv")))
    assert len(rows) == 1 and float(rows[0]["relative_logloss_pct"]) == 0.0
    assert (tmp_path / "s1" / "sweep.csv").read_bytes() == (tmp_path / "s2" / "sweep.csv").read_bytes()


def test_sweep_records_runtime_failures(tmp_path):
    grid = [{"name": "ok"}, {"name": "bad"}]
    cfg = write_cfg(tmp_path, grid=grid)
    from zenith import cli

    rows = cli.sweep_rows(cli.apply_overrides(cli.load_config(cfg, allow_grid=True), None, 2))
    assert [r["status"] for r in rows] == ["ok", "ok"]
    broken = cli.load_config(write_cfg(tmp_path, name="b.json", grid=grid,
                                       data={**TINY_DATA, "train_path": "nope.csv"}), allow_grid=True)
    rows = cli.sweep_rows(broken)
    assert all(r["status"] == "failed" and "nope.csv" in r["error"] for r in rows)


def test_writes_stay_inside_out_dir(tmp_path):
    from zenith.cli import OutputDir
    from zenith.errors import UsageError

    out = OutputDir(tmp_path / "o")
    with pytest.raises(UsageError):
        out.path("../escape.txt")
    cfg = write_cfg(tmp_path)
    before = set(p.name for p in tmp_path.iterdir())
    assert run("train", "--config", cfg, "--out", tmp_path / "t") == 0
    assert set(p.name for p in tmp_path.iterdir()) - before == {"t"}
