import numpy as np
import pytest

from diadesk.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from diadesk.errors import FormatError


def _tensors():
    rng = np.random.default_rng(0)
    return {"a": rng.normal(size=(3, 4)), "b": np.array(2.5), "c": np.zeros((0, 5)), "d": rng.normal(size=7)}


def test_round_trip_is_exact(tmp_path):
    t = _tensors()
    save_checkpoint(tmp_path / "x.ckpt", t, {"k": [1, 2]})
    out, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"k": [1, 2]} and list(out) == list(t)
    for k in t:
        assert out[k].shape == t[k].shape
        assert out[k].tobytes() == np.asarray(t[k], dtype=np.float64).tobytes()


def test_same_content_gives_identical_bytes(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _tensors(), {"z": 1, "a": 2})
    save_checkpoint(tmp_path / "b.ckpt", _tensors(), {"a": 2, "z": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_payload_is_eight_byte_aligned(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"v": np.arange(3.0)})
    blob = (tmp_path / "x.ckpt").read_bytes()
    assert blob[:8] == MAGIC
    assert (len(blob) - 24) % 8 == 0
    assert np.frombuffer(blob[-24:], "<f8").tolist() == [0.0, 1.0, 2.0]


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(FormatError) as info:
        load_checkpoint(tmp_path / "x.ckpt")
    assert info.value.offset == 0


def test_truncated_payload_names_missing_bytes(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"v": np.arange(4.0)})
    blob = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "x.ckpt").write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="missing 10 bytes") as info:
        load_checkpoint(tmp_path / "x.ckpt")
    assert info.value.offset == len(blob) - 10


def test_truncated_manifest(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", {"v": np.arange(4.0)})
    blob = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "x.ckpt").write_bytes(blob[:20])
    with pytest.raises(FormatError, match="manifest truncated"):
        load_checkpoint(tmp_path / "x.ckpt")
