import numpy as np
import pytest

from andes.checkpoint import load_checkpoint, save_checkpoint, tensor_digest
from andes.errors import DataError


def test_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "b.bias": rng.normal(size=7).astype(np.float32),
        "scalar": np.asarray(2.5, dtype=np.float32),
    }
    config = {"step": 12, "vit": {"embed_dim": 96}}
    save_checkpoint(tmp_path / "c.ckpt", config, tensors)
    cfg, back = load_checkpoint(tmp_path / "c.ckpt")
    assert cfg == config
    assert set(back) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(back[name], tensors[name])
        assert back[name].shape == tensors[name].shape


def test_digest_is_order_independent_and_content_sensitive():
    a = {"x": np.ones(3, np.float32), "y": np.zeros(2, np.float32)}
    b = {"y": np.zeros(2, np.float32), "x": np.ones(3, np.float32)}
    assert tensor_digest(a) == tensor_digest(b)
    c = {"x": np.ones(3, np.float32), "y": np.full(2, 1e-8, np.float32)}
    assert tensor_digest(a) != tensor_digest(c)


def test_bad_magic(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_truncated_tensor(tmp_path):
    save_checkpoint(tmp_path / "t.ckpt", {}, {"w": np.ones(10, np.float32)})
    blob = (tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-8])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")


def test_file_bytes_deterministic(tmp_path):
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(tmp_path / "a.ckpt", {"k": 1}, tensors)
    save_checkpoint(tmp_path / "b.ckpt", {"k": 1}, tensors)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
