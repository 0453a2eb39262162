import struct

import numpy as np
import pytest

from olbp.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def sections(rng):
    return {"params": {"a.w": rng.standard_normal((2, 3, 3, 3)).astype(np.float32), "a.b": np.zeros(2, np.float32)},
            "momentum": {"a.w": rng.standard_normal((2, 3, 3, 3)).astype(np.float32)}}


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, sections):
        path = tmp_path / "c.olbp"
        save_checkpoint(path, sections, {"iteration": 7})
        got, meta = load_checkpoint(path)
        assert meta == {"iteration": 7}
        for sec, tensors in sections.items():
            for name, arr in tensors.items():
                np.testing.assert_array_equal(got[sec][name], arr)

    def test_header_layout(self, tmp_path, sections):
        path = tmp_path / "c.olbp"
        save_checkpoint(path, sections)
        raw = path.read_bytes()
        assert raw[:5] == MAGIC == b"OLBP1"
        (mlen,) = struct.unpack("<I", raw[5:9])
        payload = raw[9 + mlen:]
        assert len(payload) == 4 * (54 + 2 + 54)
        first = np.frombuffer(payload[:4], dtype="<f4")[0]
        assert first == sections["params"]["a.w"].ravel()[0]

    def test_bytes_deterministic(self, tmp_path, sections):
        save_checkpoint(tmp_path / "1", sections, {"k": 1})
        save_checkpoint(tmp_path / "2", sections, {"k": 1})
        assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE0" + b"\0" * 8)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path, sections):
        path = tmp_path / "c.olbp"
        save_checkpoint(path, sections)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
