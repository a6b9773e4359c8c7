import csv
import json
from pathlib import Path

import pytest
import yaml

from lensctr.cli import bench_attention, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def only_run_dir(root: Path) -> Path:
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


@pytest.fixture
def tiny_config(tmp_path):
    doc = yaml.safe_load((CONFIGS / "tiny_train.yaml").read_text())
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path, doc


def test_param_count_prints_cost_table(capsys):
    code, out, _ = run(["param-count", "--config", CONFIGS / "table4.yaml"], capsys)
    assert code == 0
    lines = {}
    for line in out.strip().splitlines()[1:]:
        key, value = line.rsplit(None, 1)
        lines[key.strip()] = value
    assert (lines["QueryPos"], lines["TCQG"], lines["TCPB"]) == ("9600", "49152", "30976")
    assert float(lines["share of embedding"].rstrip("%")) < 2.0


def test_gradcheck_default_passes(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0
    assert "item_seq" in out and out.strip().splitlines()[-1].startswith("PASS")


def test_gen_data_twice_same_hash(tmp_path, capsys, tiny_config):
    _, doc = tiny_config
    spec = tmp_path / "spec.yaml"
    spec.write_text(yaml.safe_dump(doc["dataset"]))
    hashes = []
    for k in range(2):
        code, out, _ = run(["gen-data", "--spec", spec, "--out", tmp_path / f"d{k}"], capsys)
        assert code == 0
        hashes.append(next(line for line in out.splitlines() if "sha256" in line))
        run_dir = only_run_dir(tmp_path / f"d{k}")
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["stats"]["n_samples"] == 2000
    assert hashes[0] == hashes[1]
    a, b = (only_run_dir(tmp_path / f"d{k}") / "records.tsv" for k in range(2))
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus"],
        ["frobnicate"],
        ["train", "--config", "/nonexistent.yaml", "--out", "x"],
        ["bench-attn", "--q", "4", "--lengths", "a,b"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert run(argv, capsys)[0] == 1


@pytest.mark.parametrize(
    "doc",
    [
        {"mystery": {}},
        {"model": {"n_queries": 0}},
        {"model": {"family": "transformer"}},
        {"dataset": {"n_items": 10, "n_samples": 100, "target_samples_per_item": 500.0}},
        {"train": {"learning_rate": -1.0}},
    ],
)
def test_bad_config_exit_1(tmp_path, capsys, doc):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(doc))
    code, _, err = run(["train", "--config", path, "--out", tmp_path / "o"], capsys)
    assert code == 1 and err.startswith("error:")


def test_train_is_byte_deterministic(tmp_path, capsys, tiny_config):
    path, _ = tiny_config
    dirs = []
    for k in range(2):
        assert run(["train", "--config", path, "--out", tmp_path / f"r{k}"], capsys)[0] == 0
        dirs.append(only_run_dir(tmp_path / f"r{k}"))
    for name in ("metrics.csv", "checkpoint.bin", "checkpoint.json", "resolved_config.json"):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
    row = next(csv.DictReader(open(dirs[0] / "metrics.csv")))
    assert int(row["n_pos"]) + int(row["n_neg"]) == 400


def test_seed_flag_changes_run(tmp_path, capsys, tiny_config):
    path, _ = tiny_config
    run(["train", "--config", path, "--out", tmp_path / "a", "--seed", "1"], capsys)
    run(["train", "--config", path, "--out", tmp_path / "b", "--seed", "2"], capsys)
    a, b = only_run_dir(tmp_path / "a"), only_run_dir(tmp_path / "b")
    assert a.name[:12] != b.name[:12]
    assert (a / "checkpoint.bin").read_bytes() != (b / "checkpoint.bin").read_bytes()


def test_ablate_tiny_grid(tmp_path, capsys, tiny_config):
    _, doc = tiny_config
    doc = {
        "dataset": doc["dataset"],
        "model": {k: v for k, v in doc["model"].items() if k not in ("position", "lens")},
        "train": {"epochs": 1},
        "ablation": {"parts": ["II"], "din": {"d_model": 4, "max_len": 12, "mlp_head": [4, 1]}},
    }
    path = tmp_path / "ablate.yaml"
    path.write_text(yaml.safe_dump(doc))
    code, out, _ = run(["ablate", "--config", path, "--seeds", "42", "--out", tmp_path / "ab"], capsys)
    assert code == 0
    run_dir = only_run_dir(tmp_path / "ab")
    rows = list(csv.DictReader(open(run_dir / "results.csv")))
    assert {r["cell_id"] for r in rows} == {"global_pos_bias", "abs_pos_emb", "query_specific_pos_bias"}
    assert all(r["seed"] == "42" for r in rows)
    assert "query_specific_pos_bias" in out


def test_bench_attention_reports_each_length():
    rows = bench_attention(4, [16, 32], repeats=2, batch=2, d_model=8)
    assert [L for L, _ in rows] == [16, 32] and all(t > 0 for _, t in rows)


def test_bench_attn_command(capsys):
    code, out, _ = run(["bench-attn", "--q", "2", "--lengths", "8,16", "--repeats", "1", "--batch", "2", "--d-model", "4"], capsys)
    assert code == 0 and len(out.strip().splitlines()) == 3


def test_export_bias_writes_csvs(tmp_path, capsys, tiny_config):
    path, _ = tiny_config
    run(["train", "--config", path, "--out", tmp_path / "r"], capsys)
    ckpt = only_run_dir(tmp_path / "r")
    code, out, _ = run(["export-bias", "--checkpoint", ckpt, "--out", tmp_path / "x", "--samples", "50"], capsys)
    assert code == 0
    written = [Path(p) for p in out.split()]
    assert written and all(p.suffix == ".csv" and p.stat().st_size > 0 for p in written)


def test_export_bias_missing_checkpoint(tmp_path, capsys):
    assert run(["export-bias", "--checkpoint", tmp_path / "none", "--out", tmp_path], capsys)[0] == 1
