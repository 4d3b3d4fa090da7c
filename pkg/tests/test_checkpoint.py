import numpy as np
import pytest
import torch

from vcflow.checkpoint import MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes


def sample_ckpt():
    ck = Checkpoint(config_hash="abc123")
    ck.add("a.weight", np.arange(12, dtype=np.float32).reshape(3, 4) / 7)
    ck.add("a.bias", np.array([1e-300, -0.0, np.pi]))
    ck.add("codes", np.arange(5, dtype=np.int64))
    ck.add("flag", np.array(True))
    ck.add("scalar", np.float64(2.5))
    return ck


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        ck = sample_ckpt()
        save_checkpoint(ck, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt", "abc123")
        assert list(back.records) == list(ck.records)
        for k, v in ck.records.items():
            assert back[k].tobytes() == np.asarray(v).astype(back[k].dtype).tobytes()
            assert back[k].shape == np.asarray(v).shape
        assert to_bytes(back) == to_bytes(ck)

    def test_magic_prefix(self):
        assert to_bytes(sample_ckpt())[:4] == MAGIC == b"PFVC"

    def test_truncated_is_checksum_error(self, tmp_path):
        blob = to_bytes(sample_ckpt())
        with pytest.raises(CheckpointError, match="checksum"):
            from_bytes(blob[:-10])

    def test_flipped_byte(self):
        blob = bytearray(to_bytes(sample_ckpt()))
        blob[40] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            from_bytes(bytes(blob))

    def test_config_hash_mismatch(self):
        with pytest.raises(CheckpointError, match="config hash"):
            from_bytes(to_bytes(sample_ckpt()), expected_hash="other")

    def test_version_mismatch(self):
        import struct
        import zlib

        blob = to_bytes(sample_ckpt())
        body = bytearray(blob[:-4])
        body[4:8] = struct.pack("<I", 99)
        forged = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
        with pytest.raises(CheckpointError, match="version"):
            from_bytes(forged)

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            from_bytes(b"XXXX" + to_bytes(sample_ckpt())[4:])

    def test_duplicate_names_rejected(self):
        ck = Checkpoint()
        ck.add("x", np.zeros(1))
        with pytest.raises(KeyError):
            ck.add("x", np.zeros(1))

    def test_module_round_trip(self):
        torch.manual_seed(0)
        m = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.LayerNorm(4))
        ck = Checkpoint()
        ck.add_module("net", m)
        m2 = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.LayerNorm(4))
        ck2 = from_bytes(to_bytes(ck))
        ck2.load_module("net", m2)
        for a, b in zip(m.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)

    def test_missing_record(self):
        with pytest.raises(CheckpointError, match="missing"):
            Checkpoint().load_module("net", torch.nn.Linear(2, 2))

    def test_section(self):
        ck = sample_ckpt()
        assert set(ck.section("a")) == {"weight", "bias"}
