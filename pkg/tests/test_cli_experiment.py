import csv
import io
import json

import numpy as np
import pytest

from mdgnn import graph as gm
from mdgnn.cli import main
from mdgnn.experiment import (ExperimentConfig, ablation_variants, apply_overrides,
                              config_from_dict, fusion_csv, fusion_weights, load_config, load_dataset,
                              model_config, prepare, run_backtest, run_sweep, rows_to_csv,
                              rows_to_markdown, with_changes)
from mdgnn.model import init_params
from mdgnn.synthetic import ConfigError

TOY = {"k": 3, "data": {"preset": "toy"},
       "model": {"d_h": 6, "window": 3},
       "train": {"epochs": 3, "patience": 2, "batch_days": 5},
       "schedule": {"train": 20, "val": 5, "test": 7}}


@pytest.fixture
def toy_config(tmp_path):
    path = tmp_path / "toy.json"
    path.write_text(json.dumps(TOY))
    return path


def test_defaults_follow_reported_hyperparameters():
    cfg = ExperimentConfig()
    assert (cfg.model.d_h, cfg.model.layers, cfg.model.window) == (128, 2, 10)
    assert cfg.train.epochs == 500 and cfg.k == 30


def test_set_overrides_parse_json_values():
    raw = apply_overrides({"model": {"d_h": 8}}, ["model.d_h=16", "ablation.relations=[\"SS\"]",
                                                  "data.preset=toy", "seed=4"])
    assert raw == {"model": {"d_h": 16}, "ablation": {"relations": ["SS"]},
                   "data": {"preset": "toy"}, "seed": 4}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


@pytest.mark.parametrize("raw", [{"modle": {}}, {"model": {"depth": 3}}, {"k": 0},
                                 {"ablation": {"relations": ["SB"]}}, {"model": {"d_h": 0}},
                                 {"train": {"loss": "hinge"}}, {"schedule": {"test": 0}}])
def test_bad_configs_rejected(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_seed_flag_overrides_file(toy_config):
    assert load_config(toy_config, [], 9).seed == 9
    assert load_config(toy_config, ["seed=2"]).seed == 2


def test_hash_is_stable_and_sensitive():
    a, b = config_from_dict(TOY), config_from_dict(json.loads(json.dumps(TOY)))
    assert a.hash() == b.hash()
    assert with_changes(a, model={"d_h": 7}).hash() != a.hash()


def test_ablation_switch_semantics():
    cfg = config_from_dict(TOY)
    variants = {(t, v): c for t, v, c in ablation_variants(cfg)}
    assert len(variants) == 5 + 6
    assert ("components", "full") in variants
    assert variants[("components", "full")].hash() == variants[("relations", "SS+SB+SI+II")].hash()
    mc = model_config(variants[("components", "w/o meta-path")], 42, 4)
    assert not mc.meta_paths and mc.encoder_options().untyped
    assert not model_config(variants[("components", "w/o temporal")], 42, 4).temporal
    assert model_config(variants[("relations", "SS")], 42, 4).relations == ("SS",)


def test_sweep_default_rows_match_default_config():
    cfg = ExperimentConfig()
    assert with_changes(cfg, model={"window": 10}).hash() == cfg.hash()
    assert with_changes(cfg, model={"layers": 2}).hash() == cfg.hash()


def test_toy_backtest_end_to_end_and_deterministic():
    cfg = config_from_dict(TOY)
    a = run_backtest(cfg)
    b = run_backtest(cfg)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert len(a["folds"]) == 2
    assert [r["day"] for r in a["rows"]] == list(range(25, 39))
    assert a["config_hash"] == cfg.hash()
    for f in a["folds"]:
        assert f["train"][1] <= f["val"][0] and f["val"][1] <= f["test"][0]


def test_sweep_rows_one_per_value():
    cfg = with_changes(config_from_dict(TOY), train={"epochs": 1})
    rows = run_sweep(cfg, "window", [0], values=(2, 3))
    assert [r["value"] for r in rows] == [2, 3]
    text = rows_to_csv(rows, ("axis", "value"))
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert len(parsed) == 2 and {"CR", "IC", "Prec@3", "config_hash"} <= set(parsed[0])
    with pytest.raises(ConfigError):
        run_sweep(cfg, "heads", [0])


def test_markdown_table_shape():
    rows = [{"table": "components", "variant": "full", "IC": 0.1, "IC_std": 0.01, "IR": None,
             "IR_std": None, "CR": 0.5, "CR_std": None, "Prec@30": 0.52, "Prec@30_std": 0.0}]
    md = rows_to_markdown(rows, "components")
    assert md.splitlines()[0] == "| variant | IC | IR | CR | Prec@30 |"
    assert "| full | 0.1000 (0.0100) | n/a | 0.5000 | 0.5200 (0.0000) |" in md


def test_fusion_export_rows_on_simplex():
    cfg = config_from_dict(TOY)
    data = prepare(cfg, load_dataset(cfg))
    rows = fusion_weights(init_params(data.cfg, 0), data, [5, 6])
    assert len(rows) == 2 * 10 * 2
    for r in rows:
        w = [r["w_ss"], r["w_sbs"], r["w_siis"]]
        assert all(0 <= x <= 1 for x in w)
        assert sum(w) == pytest.approx(1.0, abs=1e-12) or sum(w) == 0.0
    assert fusion_csv(rows).splitlines()[0] == "day,stock,layer,w_ss,w_sbs,w_siis"


# ---------------------------------------------------------------------------
# command line


def test_generate_is_reproducible(tmp_path, capsys):
    assert main(["generate", "--set", "data.preset=toy", "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    first = capsys.readouterr().out
    assert main(["generate", "--set", "data.preset=toy", "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    second = capsys.readouterr().out
    assert "nodes S=10 B=4 I=3" in first
    sha = [ln for ln in first.splitlines() if ln.startswith("sha256")]
    assert sha and sha == [ln for ln in second.splitlines() if ln.startswith("sha256")]
    g = gm.load(tmp_path / "a")
    assert g.n_days == 40


def test_generate_csi100_like_node_counts(tmp_path, capsys):
    code = main(["generate", "--set", "data.overrides={\"days\": 12}", "--out", str(tmp_path)])
    assert code == 0
    assert "nodes S=100 B=196 I=97" in capsys.readouterr().out


def test_exit_codes(tmp_path, toy_config, capsys):
    out = ["--out", str(tmp_path / "runs")]
    assert main(["backtest", "--config", str(tmp_path / "missing.json"), *out]) == 2
    assert main(["backtest", "--config", str(toy_config), "--set", "model.bogus=1", *out]) == 2
    assert main(["backtest", "--config", str(toy_config), "--set",
                 f"data.path=\"{tmp_path / 'nowhere'}\"", *out]) == 3
    assert not (tmp_path / "runs").exists()
    bad = tmp_path / "bad"
    main(["generate", "--set", "data.preset=toy", "--out", str(bad)])
    (bad / "prices.csv").write_text("garbage\n")
    assert main(["backtest", "--config", str(toy_config), "--set", f"data.path=\"{bad}\"", *out]) == 3
    assert main(["train", "--config", str(toy_config), "--fold", "9", *out]) == 2
    capsys.readouterr()


def test_numeric_failure_exit_code(toy_config, tmp_path, capsys):
    code = main(["backtest", "--config", str(toy_config), "--set", "train.lr=1e300",
                 "--out", str(tmp_path)])
    assert code == 4


def test_train_and_backtest_commands_write_outputs(toy_config, tmp_path, capsys):
    out = tmp_path / "train"
    assert main(["train", "--config", str(toy_config), "--fusion", "--out", str(out)]) == 0
    assert (out / "model.mdgp").exists() and (out / "model.json").exists()
    assert (out / "fusion.csv").read_text().startswith("day,stock,layer")
    assert (out / "curve.csv").read_text().splitlines()[0] == "epoch,loss,val_ic"
    bt = tmp_path / "bt"
    assert main(["backtest", "--config", str(toy_config), "--out", str(bt)]) == 0
    report = json.loads((bt / "report.json").read_text())
    assert set(report) == {"config_hash", "config", "folds", "rows", "skipped", "aggregates"}
    lines = (bt / "daily.csv").read_text().splitlines()
    assert lines[0] == "day,ic,port_return,precision" and len(lines) == 15
    assert sorted(p.name for p in (bt / "checkpoints").iterdir()) == [
        "fold0.json", "fold0.mdgp", "fold1.json", "fold1.mdgp"]
    again = tmp_path / "bt2"
    main(["backtest", "--config", str(toy_config), "--out", str(again)])
    assert (again / "report.json").read_bytes() == (bt / "report.json").read_bytes()
    capsys.readouterr()


def test_ablate_command_writes_tables(toy_config, tmp_path, capsys):
    out = tmp_path / "abl"
    code = main(["ablate", "--config", str(toy_config), "--set", "train.epochs=1",
                 "--n-seeds", "1", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "ablation.csv").read_text())))
    assert len(rows) == 11
    md = (out / "ablation.md").read_text()
    assert md.count("| full |") == 1 and "| SS+SB+SI+II |" in md
    capsys.readouterr()


def test_sweep_command(toy_config, tmp_path, capsys):
    out = tmp_path / "sw"
    code = main(["sweep", "--config", str(toy_config), "--axis", "layers", "--set", "train.epochs=1",
                 "--n-seeds", "1", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((out / "sweep_layers.csv").read_text())))
    assert [r["value"] for r in rows] == ["1", "2", "3", "4"]
    assert all(np.isfinite(float(r["CR"])) for r in rows)
    capsys.readouterr()
