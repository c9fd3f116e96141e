import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tts_transfer.archive import MAGIC, ArchiveFormatError, ParameterArchive

DTYPES = ["<f4", "<f8", "<i4", "<i8", "u1"]


def random_archive(seed, n=12):
    rng = np.random.default_rng(seed)
    tensors = {}
    for i in range(n):
        dt = np.dtype(DTYPES[i % len(DTYPES)])
        shape = tuple(int(k) for k in rng.integers(0, 5, rng.integers(0, 4)))
        tensors[f"layer.{i}.w"] = (rng.standard_normal(shape) * 50).astype(dt)
    meta = {"stage": "english_pretrain", "step": int(rng.integers(1000)), "note": "हिन्दी ✓", "nested": {"b": [1, 2.5], "a": None}}
    return ParameterArchive(tensors, meta)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_save_load_save_is_byte_identical(seed):
    a = random_archive(seed)
    raw = a.to_bytes()
    b = ParameterArchive.from_bytes(raw)
    assert b.to_bytes() == raw
    assert list(b.tensors) == list(a.tensors)
    for k in a.tensors:
        assert b[k].dtype == a[k].dtype and b[k].shape == a[k].shape
        np.testing.assert_array_equal(b[k], a[k])
    assert b.metadata == a.metadata


def test_file_round_trip(tmp_path):
    a = random_archive(1)
    a.save(tmp_path / "x.ttsf")
    b = ParameterArchive.load(tmp_path / "x.ttsf")
    b.save(tmp_path / "y.ttsf")
    assert (tmp_path / "x.ttsf").read_bytes() == (tmp_path / "y.ttsf").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_big_endian_input_is_stored_little_endian():
    a = ParameterArchive({"w": np.arange(4, dtype=">f8")})
    b = ParameterArchive.from_bytes(a.to_bytes())
    assert b["w"].dtype == np.dtype("<f8")
    np.testing.assert_array_equal(b["w"], np.arange(4.0))


def test_bad_magic_rejected():
    raw = bytearray(random_archive(2).to_bytes())
    raw[:4] = b"NOPE"
    with pytest.raises(ArchiveFormatError, match="bad magic"):
        ParameterArchive.from_bytes(bytes(raw), "ckpt.ttsf")


@pytest.mark.parametrize("cut", [3, 10, 40, -1, -17])
def test_truncation_rejected_with_offset(cut):
    raw = random_archive(3).to_bytes()
    with pytest.raises(ArchiveFormatError, match="truncated .* at byte"):
        ParameterArchive.from_bytes(raw[:cut])


def test_other_corruptions():
    raw = random_archive(4).to_bytes()
    with pytest.raises(ArchiveFormatError, match="trailing"):
        ParameterArchive.from_bytes(raw + b"\0")
    with pytest.raises(ArchiveFormatError, match="version"):
        ParameterArchive.from_bytes(MAGIC + struct.pack("<II", 9, 2) + b"{}" + struct.pack("<I", 0))
    with pytest.raises(ArchiveFormatError, match="JSON"):
        ParameterArchive.from_bytes(MAGIC + struct.pack("<II", 1, 2) + b"{x" + struct.pack("<I", 0))
    dup = ParameterArchive({"w": np.zeros(1)}).to_bytes()
    body = dup[dup.index(b"\x01\x00\x00\x00w") :]
    forged = dup[: dup.index(b"\x01\x00\x00\x00w") - 4] + struct.pack("<I", 2) + body + body
    with pytest.raises(ArchiveFormatError, match="duplicate"):
        ParameterArchive.from_bytes(forged)


def test_unsupported_dtype_and_names():
    with pytest.raises(ValueError):
        ParameterArchive({"w": np.zeros(2, dtype=np.complex128)})
    with pytest.raises(ValueError):
        ParameterArchive({"": np.zeros(2)})


def test_missing_file_diagnostic(tmp_path):
    with pytest.raises(ArchiveFormatError, match="missing.ttsf"):
        ParameterArchive.load(tmp_path / "missing.ttsf")


def test_fingerprint_tracks_values_not_metadata():
    a = random_archive(5)
    assert a.copy(metadata={"other": 1}).fingerprint == a.fingerprint
    b = a.copy()
    b.tensors["layer.1.w"] = b.tensors["layer.1.w"] + 1
    assert b.fingerprint != a.fingerprint


def test_trainable_flags():
    a = ParameterArchive({"encoder.w": np.zeros(1), "decoder.w": np.zeros(1), "bn.mean": np.zeros(1)}, {"frozen": ["encoder.w"], "buffers": ["bn.mean"]})
    assert not a.trainable("encoder.w")
    assert a.trainable("decoder.w")
    assert not a.trainable("bn.mean")
    with pytest.raises(KeyError):
        a.trainable("nope")
