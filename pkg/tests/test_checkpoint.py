import numpy as np
import pytest

from chordgen.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def sample_params(rng):
    return {
        "embedding.weight": rng.standard_normal((351, 16)),
        "layers.0.attn.wq": rng.standard_normal((16, 16)),
        "layers.0.attn.bq": rng.standard_normal(16),
        "final_ln.gamma": np.ones(16),
        "small.f32": rng.standard_normal(5).astype(np.float32),
    }


def test_byte_exact_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = sample_params(rng)
    config = {"model": {"d_model": 16}, "provenance": {"phase": "pretrain", "epoch": 2}}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, config, params)
    loaded_config, loaded = load_checkpoint(p1)
    assert loaded_config == config
    for name, arr in params.items():
        assert loaded[name].dtype == arr.dtype
        assert np.array_equal(loaded[name], arr)
    save_checkpoint(p2, loaded_config, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_insertion_order_does_not_change_bytes(tmp_path):
    rng = np.random.default_rng(1)
    params = sample_params(rng)
    reversed_params = dict(reversed(list(params.items())))
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_checkpoint(p1, {}, params)
    save_checkpoint(p2, {}, reversed_params)
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_rejects_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.bin", {}, {"p": np.zeros(3, dtype=np.int64)})
