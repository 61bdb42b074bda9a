import csv
import json

import numpy as np
import pytest

from sparkattn import AttnConfig, cli, ex, forward_fused
from sparkattn.cli import main
from sparkattn.io.binary import binread


def _run(capsys, *argv):
    status = main(list(argv))
    captured = capsys.readouterr()
    return status, captured.out, captured.err


def test_forward_verify(capsys):
    argv = ["forward", "--n", "64", "--d", "32", "--acc", "both", "--traditional", "--verify"]
    status, out, err = _run(capsys, *argv)
    assert status == 0, err
    report = json.loads(out)
    assert report["verified"] is True
    assert report["failures"] == []
    assert sorted(report["paths"]) == [
        "fused_fp16",
        "fused_fp32",
        "traditional_fp16",
        "traditional_fp32",
    ]
    fused = report["paths"]["fused_fp32"]
    assert fused["errors"]["O"]["norm_rel"] <= cli.TOLERANCES["fused_fp32"]
    assert (fused["traffic"]["matrix_pass_reads"], fused["traffic"]["matrix_pass_writes"]) == (3, 1)
    assert "wall_clock_s" not in fused
    assert report["config"]["acc_mode"] == "both"
    assert report["config"]["dropout_p"] == 0.1
    # byte-identical on rerun
    assert _run(capsys, *argv)[1] == out


def test_usage_errors(capsys):
    status, _, err = _run(capsys, "forward", "--n", "100")
    assert status == 2
    assert "multiple of tile_rows" in err
    status, _, err = _run(capsys, "backward", "--n", "64", "--acc", "fp32")
    assert status == 2
    assert "fp16" in err
    assert _run(capsys, "forward", "--n", "64", "--dropout", "1.0")[0] == 2
    with pytest.raises(SystemExit) as exc_info:
        main(["forward", "--acc", "bf16"])
    assert exc_info.value.code == 2


def test_backward_verify(capsys):
    status, out, err = _run(
        capsys, "backward", "--n", "64", "--d", "32", "--causal", "--dropout", "0.1",
        "--verify", "--replay", "4",
    )
    assert status == 0, err
    report = json.loads(out)
    backward = report["paths"]["backward_fp16"]
    assert backward["mask_hash_match"] is True
    assert backward["mask_hash"] == report["paths"]["forward_fp16"]["mask_hash"]
    assert backward["dq_replay_ulp_spread"] <= 4
    for name in ("dQ", "dK", "dV"):
        assert backward["errors"][name]["norm_rel"] <= cli.TOLERANCES["backward"]
    traffic = backward["traffic"]
    assert (traffic["matrix_pass_reads"], traffic["matrix_pass_writes"]) == (8, 4)
    assert traffic["element_writes"] == 3 * 64 * 32 + 64
    assert report["config"]["acc_mode"] == "fp16"


def test_verification_failure(capsys, monkeypatch):
    monkeypatch.setitem(cli.TOLERANCES, "fused_fp32", 1e-12)
    status, out, err = _run(capsys, "forward", "--n", "64", "--d", "32", "--verify")
    assert status == 1
    assert json.loads(out)["verified"] is False
    assert "fused_fp32" in err


def test_sweep(capsys, tmp_path):
    path = tmp_path / "sweep.csv"
    argv = ["sweep", "--n", "64", "128", "--d", "32", "--causal", "off", "on", "--acc", "fp32",
            "--traditional", "--verify", "--out", str(path)]
    status, _, err = _run(capsys, *argv)
    assert status == 0, err
    with path.open(newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 8
    assert rows[0].keys() == set(cli.SWEEP_FIELDS)
    assert [r["path"] for r in rows[:2]] == ["fused", "traditional"]
    assert all(r["passed"] == "True" for r in rows)
    for r in rows:
        if r["path"] == "fused":
            assert r["convert_events"] == "0"
            assert int(r["layout_converts"]) > 0
            assert r["matrix_pass_reads"] == "3"
        else:
            assert r["matrix_pass_reads"] == "5"


def test_sweep_to_stdout(capsys):
    status, out, _ = _run(capsys, "sweep", "--n", "64", "--d", "16", "--acc", "fp16", "fp32")
    assert status == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert [r["acc_mode"] for r in rows] == ["fp16", "fp32"]
    assert rows[0]["shuffle_events"] == "0"
    assert int(rows[1]["shuffle_events"]) > 0
    assert rows[0]["passed"] == ""


def test_generate_then_forward(capsys, tmp_path):
    status, out, _ = _run(capsys, "generate", "--n", "32", "--d", "16", "--heads", "2",
                          "--seed", "3", "--out-dir", str(tmp_path))
    assert status == 0
    files = json.loads(out)["files"]
    assert sorted(files) == ["do", "k", "q", "v"]
    save = tmp_path / "out"
    status, out, err = _run(capsys, "forward", "--q", files["q"], "--k", files["k"],
                            "--v", files["v"], "--verify", "--save", str(save))
    assert status == 0, err
    config = json.loads(out)["config"]
    assert (config["heads"], config["seq_len"], config["head_dim"]) == (2, 32, 16)
    Q, K, V = (binread(files[name]) for name in "qkv")
    cfg = AttnConfig(heads=2, seq_len=32, head_dim=16, dropout_p=cli.DEFAULT_DROPOUT)
    expected = forward_fused(Q, K, V, cfg)
    assert np.array_equal(binread(save / "o_fp32.spat"), expected.O)
    assert np.array_equal(binread(save / "lse_fp32.spat"), expected.lse)
    assert _run(capsys, "forward", "--q", files["q"])[0] == 2


def test_seed_sources(capsys, monkeypatch):
    monkeypatch.setenv("SPARKATTN_SEED", "5")
    out = _run(capsys, "forward", "--n", "32", "--d", "8")[1]
    assert json.loads(out)["config"]["seed"] == 5
    out = _run(capsys, "forward", "--n", "32", "--d", "8", "--seed", "7")[1]
    assert json.loads(out)["config"]["seed"] == 7
    monkeypatch.setenv("SPARKATTN_SEED", "nope")
    assert _run(capsys, "forward", "--n", "32", "--d", "8")[0] == 2


def test_timing_and_out(capsys, tmp_path):
    path = tmp_path / "report.json"
    status, out, _ = _run(capsys, "forward", "--n", "32", "--d", "8", "--timing",
                          "--out", str(path))
    assert status == 0
    assert out == ""
    fused = json.loads(path.read_text())["paths"]["fused_fp32"]
    assert fused["wall_clock_s"] >= 0


def test_burble(capsys):
    status, _, err = _run(capsys, "--burble", "forward", "--n", "32", "--d", "8")
    assert status == 0
    assert "sparkattn.forward" in err
    assert _run(capsys, "forward", "--n", "32", "--d", "8")[2] == ""


def test_sweep_grid_size(capsys):
    status, out, _ = _run(capsys, "sweep", "--n", "64", "128", "256", "--d", "64", "128",
                          "--acc", "fp32")
    assert status == 0
    rows = list(csv.DictReader(out.splitlines()))
    assert [(r["n"], r["d"]) for r in rows] == [
        (n, d) for n in ("64", "128", "256") for d in ("64", "128")
    ]
    # fused reads grow faster than linearly in N at fixed tiles
    reads = [int(r["element_reads"]) for r in rows if r["d"] == "64"]
    assert reads[2] / reads[1] > 3 and reads[1] / reads[0] > 2.5


def test_empty_sweep():
    with pytest.raises(SystemExit):
        main(["sweep", "--n", "--d", "64"])
    args = cli.build_parser().parse_args(["sweep"])
    args.n = []
    with pytest.raises(ex.InvalidValue):
        list(cli.sweep_rows(args))


def test_hidden_and_tokens(capsys):
    status, out, err = _run(capsys, "sweep", "--n", "32", "64", "--d", "16", "32",
                            "--hidden", "64", "--tokens", "128", "--acc", "fp16")
    assert status == 0, err
    rows = list(csv.DictReader(out.splitlines()))
    assert [(r["n"], r["d"], r["batch"], r["heads"]) for r in rows] == [
        ("32", "16", "4", "4"),
        ("32", "32", "4", "2"),
        ("64", "16", "2", "4"),
        ("64", "32", "2", "2"),
    ]
    out = _run(capsys, "forward", "--n", "32", "--d", "16", "--hidden", "48")[1]
    config = json.loads(out)["config"]
    assert (config["heads"], config["dropout_p"]) == (3, 0.1)
    status, _, err = _run(capsys, "forward", "--n", "32", "--d", "16", "--hidden", "40")
    assert status == 2
    assert "--hidden 40" in err
    assert _run(capsys, "sweep", "--n", "48", "--d", "16", "--tokens", "64")[0] == 2
