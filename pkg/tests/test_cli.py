from __future__ import annotations

import json

import numpy as np
import pytest

from graphalign.adapters import AdapterState, save_adapter
from graphalign.backbone import ToyTransformer, save_backbone
from graphalign.cli import main
from graphalign.graph import CategorySpec, NodeRecord, TextGraph, embed_text, load_graph, save_graph
from graphalign.instructions import read_dataset

CONFIG = """
seed = 3

[synthetic]
n_nodes = 30
n_classes = 3
homophily = 0.9

[tune]
epochs = 1
s = 2
h = 1
n_hard = 1
n_easy = 2
learning_rate = 0.02
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(CONFIG)
    return p


def test_make_synthetic_and_inspect(tmp_path, conf, capsys):
    code, out, _ = run(capsys, "make-synthetic", "--config", conf, "--out", tmp_path / "g.jsonl")
    assert code == 0 and "nodes=30" in out
    code, out, _ = run(capsys, "inspect", tmp_path / "g.jsonl")
    info = json.loads(out)
    assert code == 0 and info["kind"] == "graph" and info["nodes"] == 30


def test_tune_without_graph_names_missing_field(tmp_path, capsys):
    code, _, err = run(capsys, "tune", "--stage", "2", "--out", tmp_path / "a.bin")
    assert code != 0 and "graph" in err


def test_unknown_flag_and_subcommand(capsys):
    with pytest.raises(SystemExit) as e:
        main(["tune", "--bogus"])
    assert e.value.code != 0
    with pytest.raises(SystemExit) as e:
        main(["fly"])
    assert e.value.code != 0


def test_bad_config_key(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[tune]\nlr = 1\n")
    code, _, err = run(capsys, "gen-instructions", "--config", p, "--graph", "x", "--out", tmp_path / "d")
    assert code != 0 and "lr" in err


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "inspect", "--config", tmp_path / "nope.toml", tmp_path)
    assert code != 0 and "config" in err


def oracle_fixture(tmp_path):
    """Graph whose nodes are all class 'x', plus a backbone that only ever emits 'x'."""
    nodes = [NodeRecord(i, f"t{i}", embed_text(f"t{i}", 8), 0) for i in range(10)]
    g = TextGraph.build(nodes, [(i, i + 1) for i in range(9)], [CategorySpec("x", "which is x"), CategorySpec("y", "which is y")], 8)
    save_graph(g, tmp_path / "g.jsonl")
    save_backbone(ToyTransformer.constant(ord("x")), tmp_path / "bb.bin")
    save_adapter(AdapterState.init(8, 32, 2), tmp_path / "a.bin")


def test_eval_perfect_oracle(tmp_path, capsys):
    oracle_fixture(tmp_path)
    code, out, _ = run(capsys, "eval", "--graph", tmp_path / "g.jsonl", "--backbone", tmp_path / "bb.bin",
                       "--adapter", tmp_path / "a.bin", "--split", "all", "--out", tmp_path / "r.json")
    report = json.loads(out)
    assert code == 0 and report["accuracy"] == 1.0 and report["n_examples"] == 10
    assert json.loads((tmp_path / "r.json").read_text()) == report


def test_eval_feature_dim_mismatch_is_reported(tmp_path, capsys):
    oracle_fixture(tmp_path)
    save_adapter(AdapterState.init(9, 32, 2), tmp_path / "a9.bin")
    code, _, err = run(capsys, "eval", "--graph", tmp_path / "g.jsonl", "--backbone", tmp_path / "bb.bin",
                       "--adapter", tmp_path / "a9.bin")
    assert code != 0 and "feature_dim" in err


def test_inspect_checkpoints(tmp_path, capsys):
    oracle_fixture(tmp_path)
    _, out, _ = run(capsys, "inspect", tmp_path / "bb.bin")
    assert json.loads(out)["kind"] == "backbone"
    _, out, _ = run(capsys, "inspect", tmp_path / "a.bin")
    info = json.loads(out)
    assert info["kind"] == "adapter" and info["feature_dim"] == 8


def test_grad_check_command(tmp_path, conf, capsys):
    run(capsys, "make-synthetic", "--config", conf, "--out", tmp_path / "g.jsonl")
    code, out, _ = run(capsys, "grad-check", "--graph", tmp_path / "g.jsonl", "--seeds", 2)
    assert code == 0 and "status=pass" in out


def pipeline(d, conf, capsys):
    steps = [
        ("make-synthetic", "--config", conf, "--out", d / "g.jsonl"),
        ("gen-instructions", "--config", conf, "--graph", d / "g.jsonl", "--task", "text_match", "--out", d / "tm.jsonl"),
        ("gen-instructions", "--config", conf, "--graph", d / "g.jsonl", "--task", "node_class",
         "--prompt-mode", "manual", "--out", d / "nc.jsonl"),
        ("tune", "--stage", 1, "--config", conf, "--graph", d / "g.jsonl", "--data", d / "tm.jsonl",
         "--out", d / "s1.bin", "--log", d / "s1.csv"),
        ("tune", "--stage", 2, "--config", conf, "--graph", d / "g.jsonl", "--data", d / "nc.jsonl",
         "--init", d / "s1.bin", "--out", d / "s2.bin", "--log", d / "s2.csv"),
        ("eval", "--config", conf, "--graph", d / "g.jsonl", "--adapter", d / "s2.bin", "--out", d / "r.json"),
        ("report", "--log", d / "s1.csv", "--log", d / "s2.csv", "--eval", d / "r.json", "--out", d / "fig"),
    ]
    for argv in steps:
        code, out, err = run(capsys, *argv)
        assert code == 0, (argv, err)
    return out


@pytest.mark.slow
def test_pipeline_is_byte_deterministic(tmp_path, conf, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    summary = pipeline(a, conf, capsys)
    pipeline(b, conf, capsys)
    for name in ("g.jsonl", "tm.jsonl", "nc.jsonl", "s1.csv", "s2.csv", "s1.bin", "s2.bin", "r.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert summary.startswith("name,dataset,mode")
    for fig in ("loss.png", "confusion_r.png", "summary.csv"):
        assert (a / "fig" / fig).stat().st_size > 0
    g = load_graph(a / "g.jsonl")
    assert len(read_dataset(a / "tm.jsonl")) == g.n_nodes
    lines = (a / "s2.csv").read_text().splitlines()
    assert lines[0] == "step,loss,lr" and all(np.isfinite(float(l.split(",")[1])) for l in lines[1:])
