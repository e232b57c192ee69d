import json
import logging
import math

import pandas as pd
import pytest

from app import main
from commands.sweep import parse_values
from utils.backbone import load_backbone
from utils.config import load_config
from utils.errors import ConfigError
from utils.experiment import build_benchmark
from utils.graph_store import normalize

SMALL = """
[data]
n = 90
classes = 3
p_in = 0.15
p_out = 0.01
feature_dim = 8
mean_scale = 2.0

[backbone]
hidden = 12
epochs = 30
patience = 15
dropout = 0.0

[intervention]
rank = 3
layers = [1]

[ssl]
epochs = 3

[run]
seeds = [0, 1]
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL)
    return path


def _run(config_file, out_dir, *args):
    command, *rest = args
    return main([command, "--config", str(config_file), "--out-dir", str(out_dir), "--quiet", *rest])


def test_pretrain_adapt_eval_chain(tmp_path, config_file):
    out = tmp_path / "runs"
    assert _run(config_file, out, "pretrain") == 0
    assert _run(config_file, out, "adapt") == 0
    assert _run(config_file, out, "eval") == 0

    for seed in (0, 1):
        directory = out / f"seed-{seed}"
        for name in ("backbone.json", "pretrain_log.jsonl", "intervention.json", "adapt_report.jsonl", "mask.txt"):
            assert (directory / name).is_file()
        lines = (directory / "adapt_report.jsonl").read_text().splitlines()
        assert len(lines) == 3
        assert all(math.isfinite(json.loads(line)["L_ssl"]) for line in lines)

    results = pd.read_csv(out / "results.csv")
    assert list(results["seed"].astype(str)) == ["0", "1", "mean", "std"]
    per_seed = results.iloc[:2]
    assert (per_seed["id_retention"].dropna() == 1.0).all()
    assert results.loc[2, "accuracy_frozen"] == pytest.approx(per_seed["accuracy_frozen"].mean())
    assert json.loads((out / "config.json").read_text())["ssl"]["epochs"] == 3


def test_checkpoint_reloads_to_the_same_fingerprint(tmp_path, config_file):
    out = tmp_path / "runs"
    assert _run(config_file, out, "pretrain", "--seed", "0") == 0
    document = json.loads((out / "seed-0" / "backbone.json").read_text())
    bench = build_benchmark(load_config(path=config_file).data, seed=0)
    loaded = load_backbone(out / "seed-0" / "backbone.json", normalize(bench.source.adj))
    assert loaded.fingerprint == document["fingerprint"]


def test_reruns_are_byte_identical(tmp_path, config_file):
    first, second = tmp_path / "first", tmp_path / "second"
    for out in (first, second):
        assert _run(config_file, out, "pretrain", "--seed", "0") == 0
        assert _run(config_file, out, "adapt", "--seed", "0") == 0
        assert _run(config_file, out, "eval", "--seed", "0") == 0
    for name in ("seed-0/backbone.json", "seed-0/intervention.json", "results.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()


def test_frozen_only_eval_drops_adapted_columns(tmp_path, config_file):
    out = tmp_path / "runs"
    assert _run(config_file, out, "pretrain", "--seed", "0") == 0
    assert _run(config_file, out, "eval", "--seed", "0", "--frozen-only") == 0
    results = pd.read_csv(out / "results.csv")
    assert "accuracy_adapted" not in results.columns
    assert results["accuracy_frozen"].notna().all()


def test_zero_epoch_adapt_equals_frozen(tmp_path, config_file):
    out = tmp_path / "runs"
    assert _run(config_file, out, "pretrain", "--seed", "0") == 0
    assert _run(config_file, out, "adapt", "--seed", "0", "--set", "ssl.epochs=0") == 0
    assert _run(config_file, out, "eval", "--seed", "0") == 0
    row = pd.read_csv(out / "results.csv").iloc[0]
    assert row["accuracy_adapted"] == row["accuracy_frozen"]


def test_missing_dataset_file_is_a_usage_error(tmp_path, config_file, caplog):
    missing = tmp_path / "nowhere" / "edges.txt"
    code = _run(config_file, tmp_path / "runs", "pretrain",
                "--set", "data.source=files",
                "--set", f"data.edge_file={missing}",
                "--set", f"data.feature_file={tmp_path / 'features.txt'}",
                "--set", f"data.label_file={tmp_path / 'labels.txt'}",
                "--set", f"data.split_file={tmp_path / 'splits.txt'}")
    assert code == 2
    assert str(missing) in caplog.text


def test_unknown_key_is_a_usage_error(tmp_path, config_file):
    assert _run(config_file, tmp_path / "runs", "pretrain", "--set", "ssl.bogus=1") == 2


def test_adapt_without_a_checkpoint_is_a_runtime_error(tmp_path, config_file):
    assert _run(config_file, tmp_path / "runs", "adapt", "--seed", "0") == 1


def test_theory_command_writes_report(tmp_path, config_file):
    out = tmp_path / "theory"
    code = _run(config_file, out, "theory", "--trials", "1", "--nodes", "40", "--dims", "6",
                "--classes", "3", "--rank", "6", "--repair-quality", "1.0", "--draws", "100")
    assert code == 0
    summary = json.loads((out / "theory_summary.json").read_text())
    assert summary["pass_rate"] == 1.0
    assert (out / "theory.csv").is_file()


def test_theory_rejects_repair_quality_above_one(tmp_path, config_file):
    assert _run(config_file, tmp_path / "theory", "theory", "--repair-quality", "2") == 2


def test_split_command_writes_loadable_files(tmp_path, config_file):
    out = tmp_path / "split"
    assert _run(config_file, out, "split", "--seed", "0") == 0
    directory = out / "seed-0" / "dataset"
    for name in ("edges.txt", "features.txt", "labels.txt", "splits.txt", "rotation.txt"):
        assert (directory / name).is_file()
    summary = json.loads((out / "split_summary.json").read_text())
    assert summary["0"]["nodes"] == 90
    assert summary["0"]["edge_homophily"] > 0.6


def test_ablate_writes_paired_table(tmp_path, config_file):
    out = tmp_path / "ablate"
    assert _run(config_file, out, "ablate", "--seed", "0", "--arms", "variant") == 0
    table = pd.read_csv(out / "ablation.csv")
    assert sorted(table["arm"]) == ["direft", "frozen", "loreft", "uv"]
    assert "wall_time" not in table.columns
    assert (out / "ablation_timings.csv").is_file()
    summary = pd.read_csv(out / "ablation_summary.csv")
    assert len(summary) == 4


def test_sweep_writes_one_summary_row_per_value(tmp_path, config_file):
    out = tmp_path / "sweep"
    assert _run(config_file, out, "sweep", "--seed", "0", "--key", "masking.rho", "--values", "0.2,0.6") == 0
    summary = pd.read_csv(out / "sweep_summary.csv")
    assert list(summary["value"]) == [0.2, 0.6]


def test_ledger_records_eval_results(tmp_path, config_file, monkeypatch):
    from utils.db import list_runs, load_results
    url = f"sqlite:///{tmp_path / 'ledger.db'}"
    monkeypatch.delenv("DATABASE_URL", raising=False)
    out = tmp_path / "runs"
    assert _run(config_file, out, "pretrain", "--seed", "0") == 0
    assert _run(config_file, out, "eval", "--seed", "0", "--set", f"run.results_db='{url}'") == 0
    runs = list_runs(url)
    assert [r["command"] for r in runs] == ["eval"]
    assert len(load_results(runs[0]["id"], url)) == 3


def test_sweep_values_outside_the_search_space_warn(caplog):
    with caplog.at_level(logging.WARNING, logger="commands.sweep"):
        assert parse_values("intervention.rank", "4,6") == [4, 6]
    assert "[6]" in caplog.text and "Rank" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="commands.sweep"):
        parse_values("masking.rho", "0.2,0.6")
    assert caplog.text == ""
    with pytest.raises(ConfigError):
        parse_values("masking.rho", " , ")
