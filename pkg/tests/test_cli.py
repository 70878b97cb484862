import json
import os

import pytest

from icam.cli import RunManifest, build_parser, dispatch, _threads

TINY = """problem = "tsp"
batches_per_epoch = 2
seed = 3

[model]
embed_dim = 8
ff_dim = 16
encoder_layers = 1

[[stages]]
name = "warmup"
epochs = 2
scale = [6, 6]
batch_base = 4
batch_ref = 6
lr = 0.001

[[stages]]
name = "elite"
epochs = 1
scale = [5, 8]
batch_base = 4
batch_ref = 6
loss = "joint"
lr = 0.0001
k = 3
"""


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def trained(work):
    (work / "tiny.toml").write_text(TINY)
    assert dispatch(["train", "--config", "tiny.toml", "--out", "run"]) == 0
    return work / "run" / "final.bin"


def test_gen_is_byte_identical(work):
    argv = ["gen", "--problem", "tsp", "--n", "50", "--count", "128", "--seed", "1", "--out", "a.jsonl"]
    assert dispatch(argv) == 0
    first = (work / "a.jsonl").read_bytes()
    assert len(first.splitlines()) == 128
    assert dispatch(argv) == 0
    assert (work / "a.jsonl").read_bytes() == first
    assert sorted(os.listdir(work)) == ["a.jsonl", "a.jsonl.manifest.json"]
    m = json.loads((work / "a.jsonl.manifest.json").read_text())
    assert m["status"] == "ok" and m["seed"] == 1 and m["outputs"] == ["a.jsonl"]
    assert m["started"] and m["finished"] and len(m["config_digest"]) == 64


def test_gen_cvrp_capacity_range(work):
    assert dispatch(["gen", "--problem", "cvrp", "--n", "10", "--count", "5", "--capacity", "50,100", "--out", "c.jsonl"]) == 0
    caps = [json.loads(line)["capacity"] for line in (work / "c.jsonl").read_text().splitlines()]
    assert all(50 <= c <= 100 for c in caps)


def test_train_solve_eval(work, trained):
    run = work / "run"
    for name in ("metrics.csv", "training.png", "config.toml", "manifest.json", "stage1-warmup.bin"):
        assert (run / name).exists()
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["resolved"]["batches_per_epoch"] == 2

    assert dispatch(["gen", "--problem", "tsp", "--n", "8", "--count", "4", "--out", "a.jsonl"]) == 0
    assert dispatch(["solve", "--ckpt", str(trained), "--instances", "a.jsonl", "--mode", "aug8", "--out", "sol.jsonl"]) == 0
    lines = [json.loads(line) for line in (work / "sol.jsonl").read_text().splitlines()]
    assert len(lines) == 4 and {line["mode"] for line in lines} == {"augmented×8"}
    assert set(lines[0]) == {"id", "order", "length", "mode", "seconds"}

    assert dispatch(["eval", "--instances", "a.jsonl", "--method", "icam", "--ckpt", str(trained), "--out", "ev"]) == 0
    for name in ("report.csv", "report.md", "gaps.png", "manifest.json"):
        assert (work / "ev" / name).exists()


def test_solve_vrp_reports_original_units(work):
    from pathlib import Path

    from icam.model import ICAM, ModelConfig
    ICAM(ModelConfig("cvrp", embed_dim=8, ff_dim=8, encoder_layers=1)).save(work / "m.bin")
    vrp = Path(__file__).parent / "data" / "toy5.vrp"
    assert dispatch(["solve", "--ckpt", "m.bin", "--instances", str(vrp), "--mode", "multi", "--out", "s.jsonl"]) == 0
    rec = json.loads((work / "s.jsonl").read_text())
    assert rec["length"] > 50


def test_eval_exact_too_large_exits_2(work, capsys):
    dispatch(["gen", "--problem", "tsp", "--n", "50", "--count", "2", "--out", "b.jsonl"])
    assert dispatch(["eval", "--instances", "b.jsonl", "--method", "exact", "--out", "ev"]) == 2
    err = capsys.readouterr().err
    assert "too large for the exact oracle" in err
    assert json.loads((work / "ev" / "manifest.json").read_text())["status"] == "failed"


def test_usage_errors(work, capsys):
    assert dispatch([]) == 1
    assert "gen" in capsys.readouterr().err
    assert dispatch(["gen", "--problem", "tsp", "--n", "3", "--out", "x.jsonl", "--bogus", "1"]) == 1
    err = capsys.readouterr().err
    assert "--bogus" in err and "valid flags" in err and "--count" in err
    assert dispatch(["frobnicate"]) == 1
    assert dispatch(["eval", "--instances", "a.jsonl", "--method", "icam"]) == 1
    assert not os.listdir(work)


def test_missing_input_exits_2(work):
    assert dispatch(["solve", "--ckpt", "none.bin", "--instances", "none.jsonl", "--out", "s.jsonl"]) == 2


def test_bench(work):
    assert dispatch(["bench", "--mechanism", "both", "--dims", "128", "256", "--d", "16", "--repeats", "1", "--out", "bn"]) == 0
    rows = (work / "bn" / "bench.csv").read_text().splitlines()
    assert rows[0].startswith("mechanism,n,d") and len(rows) == 5
    assert (work / "bn" / "bench.png").exists()


def test_threads_fallback(monkeypatch):
    args = build_parser().parse_args(["eval", "--instances", "x", "--method", "nn2opt"])
    monkeypatch.setenv("ICAM_THREADS", "3")
    assert _threads(args) == 3
    args.threads = 2
    assert _threads(args) == 2


def test_manifest_digest_stable():
    a = RunManifest("gen", {"n": 1, "seed": 2})
    b = RunManifest("gen", {"seed": 2, "n": 1})
    assert a.config_digest == b.config_digest
