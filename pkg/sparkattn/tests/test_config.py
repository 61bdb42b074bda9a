import pytest

from sparkattn import AttnConfig, default_seed, ex
from sparkattn.half import AccMode


def test_defaults():
    cfg = AttnConfig()
    assert cfg.shape == (1, 1, 64, 64)
    assert cfg.tile_rows == cfg.tile_cols == 64
    assert cfg.acc_mode is AccMode.FP32_ACC
    assert cfg.scale == 0.125
    small = AttnConfig(seq_len=16, head_dim=4, acc_mode="fp16")
    assert (small.tile_rows, small.tile_cols) == (16, 16)
    assert small.q_tiles == small.k_tiles == 1
    assert small.acc_mode is AccMode.FP16_ACC
    assert AttnConfig(softmax_scale=0.5).scale == 0.5


def test_validation():
    bad = [
        dict(batch=0),
        dict(heads=1.5),
        dict(seq_len=100),
        dict(seq_len=12),
        dict(seq_len=64, tile_rows=48),
        dict(seq_len=64, tile_cols=20),
        dict(head_dim=6),
        dict(dropout_p=1.0),
        dict(dropout_p=-0.1),
        dict(seed=-1),
        dict(seed=2**64),
        dict(engine="simt"),
        dict(softmax_scale=0.0),
        dict(softmax_scale=float("nan")),
        dict(acc_mode="bf16"),
        dict(workers=0),
    ]
    for kwargs in bad:
        with pytest.raises(ex.InvalidValue):
            AttnConfig(**kwargs)
    with pytest.raises(ValueError, match="multiple of tile_rows"):
        AttnConfig(seq_len=96)


def test_replace_and_as_dict():
    cfg = AttnConfig(seq_len=128, head_dim=32, causal=True)
    other = cfg.replace(acc_mode="fp16", tile_rows=32)
    assert other.acc_mode is AccMode.FP16_ACC
    assert other.tile_rows == 32 and other.causal
    assert cfg.acc_mode is AccMode.FP32_ACC
    with pytest.raises(ex.InvalidValue):
        cfg.replace(tile_cols=24)
    d = other.as_dict()
    assert d["acc_mode"] == "fp16"
    assert d["softmax_scale"] == pytest.approx(32**-0.5)
    assert d["seq_len"] == 128
    with pytest.raises(AttributeError):
        cfg.seq_len = 8


def test_default_seed(monkeypatch):
    assert default_seed() == 0
    monkeypatch.setenv("SPARKATTN_SEED", "42")
    assert default_seed() == 42
    monkeypatch.setenv("SPARKATTN_SEED", "0x10")
    assert default_seed() == 16
    monkeypatch.setenv("SPARKATTN_SEED", "")
    assert default_seed() == 0
    for raw in ("seven", "-3"):
        monkeypatch.setenv("SPARKATTN_SEED", raw)
        with pytest.raises(ex.InvalidValue):
            default_seed()
