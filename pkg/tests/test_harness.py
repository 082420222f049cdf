import hashlib
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from srafl import harness, wire
from srafl.harness import METRICS_SCHEMA, bench_scaling, config_from_dict, replay, run_experiment


def base_doc(**over):
    doc = {
        "protocol": {"n_users": 6, "dim": 8, "threshold": 1, "partitions": 3,
                     "robust_alg": "rlr"},
        "updates": {"kind": "synthetic"},
        "iterations": 2,
        "seed": 7,
    }
    doc.update(over)
    return doc


def test_honest_run_all_done_zero_distance(tmp_path):
    cfg = config_from_dict(base_doc(iterations=5))
    paths = run_experiment(cfg, tmp_path)
    rows = paths["rows"]
    assert len(rows) == 5
    assert all(r["verdict"] == "done" for r in rows)
    assert all(r["dist_l2"] == 0.0 and r["dist_linf"] == 0.0 for r in rows)


def test_metrics_rows_validate_against_schema(tmp_path):
    cfg = config_from_dict(base_doc())
    paths = run_experiment(cfg, tmp_path)
    for line in Path(paths["metrics"]).read_text().splitlines():
        jsonschema.validate(json.loads(line), METRICS_SCHEMA)


def test_same_config_seed_byte_identical(tmp_path):
    cfg = config_from_dict(base_doc(iterations=3))
    p1 = run_experiment(cfg, tmp_path / "a")
    p2 = run_experiment(cfg, tmp_path / "b")
    for name in ("metrics", "transcript"):
        b1 = Path(p1[name]).read_bytes()
        b2 = Path(p2[name]).read_bytes()
        assert b1 == b2, name


def test_different_seed_differs(tmp_path):
    p1 = run_experiment(config_from_dict(base_doc(seed=1)), tmp_path / "a")
    p2 = run_experiment(config_from_dict(base_doc(seed=2)), tmp_path / "b")
    assert Path(p1["transcript"]).read_bytes() != Path(p2["transcript"]).read_bytes()


def test_too_many_cheaters_all_abort(tmp_path):
    doc = base_doc(adversary={"corrupted": [0, 1],
                              "protocol_attack": {"kind": "cheat_circuit"}})
    cfg = config_from_dict(doc)
    paths = run_experiment(cfg, tmp_path)
    assert all(r["verdict"] == "abort" for r in paths["rows"])


def test_replay_matches_original(tmp_path):
    cfg = config_from_dict(base_doc(iterations=3))
    paths = run_experiment(cfg, tmp_path)
    results = replay(paths["transcript"])
    originals = paths["rows"]
    for entry, row in zip(results, originals):
        assert entry["verdict"] == row["verdict"] == entry["recorded_verdict"]


def test_replay_attack_run_reproduces_ua(tmp_path):
    doc = base_doc(adversary={"corrupted": [2],
                              "protocol_attack": {"kind": "cheat_circuit"}})
    cfg = config_from_dict(doc)
    paths = run_experiment(cfg, tmp_path)
    results = replay(paths["transcript"])
    for entry, row in zip(results, paths["rows"]):
        assert entry["ua"] == row["ua"] == [2]
        assert entry["verdict"] == row["verdict"] == "rerun"


def test_replay_rejects_mutated_byte(tmp_path):
    cfg = config_from_dict(base_doc())
    paths = run_experiment(cfg, tmp_path)
    raw = bytearray(Path(paths["transcript"]).read_bytes())
    raw[len(raw) // 2] ^= 0x01
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(raw))
    with pytest.raises(wire.RejectTranscript):
        replay(bad)


def test_update_file_source(tmp_path):
    arr = np.random.default_rng(0).uniform(-0.4, 0.4, (2, 6, 8))
    np.save(tmp_path / "ups.npy", arr)
    doc = base_doc(updates={"kind": "file", "path": str(tmp_path / "ups.npy")})
    cfg = config_from_dict(doc)
    paths = run_experiment(cfg, tmp_path / "out")
    assert all(r["verdict"] == "done" for r in paths["rows"])


def test_config_validation_errors():
    with pytest.raises(Exception):
        config_from_dict({"protocol": {"n_users": 4}})  # missing dim
    with pytest.raises(Exception):
        config_from_dict(base_doc(protocol={"n_users": 4, "dim": 8,
                                            "threshold": 2, "partitions": 2}))


def test_bench_grid_shape():
    report = bench_scaling(dims=[8, 16], ns=[6], reps=1, seed=0,
                           threshold=1, partitions=3)
    assert len(report["cells"]) == 2
    assert len(report["d_doubling"]) == 1
    ratio = report["d_doubling"][0]
    assert 1.5 <= ratio["bytes_ratio"] <= 2.5
    # server message count per round is independent of d
    counts = {c["d"]: c["server_messages"] for c in report["cells"]}
    assert counts[8] == counts[16]


def test_cli_run_and_replay(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(base_doc()))
    rc = harness.main(["run", "--config", str(cfg_path), "--seed", "5",
                       "--out", str(tmp_path / "out")])
    assert rc == 0
    rc = harness.main(["replay", "--transcript", str(tmp_path / "out" / "transcript.bin")])
    assert rc == 0
    rc = harness.main(["run", "--config", str(tmp_path / "missing.json"),
                       "--out", str(tmp_path / "x")])
    assert rc == 2


def test_cli_bench(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"dims": [8], "ns": [6], "reps": 1,
                                "threshold": 1, "partitions": 3}))
    rc = harness.main(["bench", "--grid", str(grid), "--out", str(tmp_path / "b")])
    assert rc == 0
    assert (tmp_path / "b" / "bench.json").exists()


def test_bench_t_axis():
    report = bench_scaling(dims=[8], ns=[6], ts=[1, 2], reps=1, seed=0)
    assert len(report["cells"]) == 2
    assert {c["t"] for c in report["cells"]} == {1, 2}


def test_metrics_carry_manifest_hashes(tmp_path):
    doc = base_doc(adversary={"corrupted": [2],
                              "protocol_attack": {"kind": "drop", "round": 1}})
    cfg = config_from_dict(doc)
    paths = run_experiment(cfg, tmp_path)
    row = paths["rows"][0]
    assert len(row["circuit_hash"]) == 64
    assert len(row["attack_hash"]) == 64
