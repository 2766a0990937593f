import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kmae import container
from kmae.container import ContainerError, from_bytes, to_bytes


def test_layout_by_hand():
    buf = to_bytes({"a": np.array([1.0, 2.0], dtype=np.float32)}, {"k": 1})
    assert buf[:4] == b"KMAE"
    version, mlen = struct.unpack_from("<IQ", buf, 4)
    assert version == 1
    manifest = json.loads(buf[16 : 16 + mlen])
    assert manifest == {"arrays": [{"name": "a", "dtype": "f32", "shape": [2]}], "meta": {"k": 1}}
    assert buf[16 + mlen :] == struct.pack("<ff", 1.0, 2.0)


def test_c64_is_interleaved_pairs():
    z = np.array([1 + 2j, -3.5 + 0.25j], dtype=np.complex64)
    buf = to_bytes({"z": z})
    assert buf.endswith(struct.pack("<ffff", 1.0, 2.0, -3.5, 0.25))


def test_payload_length_matches_manifest():
    arrays = {"x": np.zeros((3, 4), np.float64), "m": np.ones((2, 5), np.uint8), "z": np.zeros(7, np.complex64)}
    buf = to_bytes(arrays)
    mlen = struct.unpack_from("<Q", buf, 8)[0]
    assert len(buf) - 16 - mlen == 3 * 4 * 8 + 2 * 5 + 7 * 8


arrays_strategy = st.dictionaries(
    st.text("abcdefgh/_", min_size=1, max_size=8),
    st.tuples(st.sampled_from(["f32", "f64", "c64", "u8"]), st.lists(st.integers(0, 4), max_size=3), st.integers(0, 99)),
    max_size=4,
)


def _make(spec):
    out = {}
    for name, (code, shape, seed) in spec.items():
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(shape)
        if code == "u8":
            out[name] = rng.integers(0, 256, shape).astype(np.uint8)
        elif code == "c64":
            out[name] = (x + 1j * rng.standard_normal(shape)).astype(np.complex64)
        else:
            out[name] = x.astype(np.float32 if code == "f32" else np.float64)
    return out


@settings(max_examples=60, deadline=None)
@given(arrays_strategy, st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=3))
def test_roundtrip_is_byte_identical(spec, meta):
    arrays = _make(spec)
    buf = to_bytes(arrays, meta)
    back, meta2 = from_bytes(buf)
    assert meta2 == meta
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    assert to_bytes(back, meta2) == buf


def test_corrupt_inputs_rejected():
    buf = to_bytes({"a": np.zeros(4, np.float32)})
    with pytest.raises(ContainerError):
        from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ContainerError):
        from_bytes(buf[:-1])
    with pytest.raises(ContainerError):
        from_bytes(buf + b"\0")
    with pytest.raises(ContainerError):
        from_bytes(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(ContainerError):
        to_bytes({"a": np.zeros(2, np.int32)})


def test_atomic_write_leaves_nothing_on_missing_dir(tmp_path):
    target = tmp_path / "missing" / "x.kmae"
    with pytest.raises(FileNotFoundError):
        container.write(target, {"a": np.zeros(2, np.float32)})
    assert not target.parent.exists()


def test_file_roundtrip(tmp_path):
    p = tmp_path / "x.kmae"
    container.write(p, {"a": np.arange(6, dtype=np.float64).reshape(2, 3)}, {"kind": "test"})
    raw = p.read_bytes()
    arrays, meta = container.read(p)
    container.write(p, arrays, meta)
    assert p.read_bytes() == raw
    assert [f.name for f in tmp_path.iterdir()] == ["x.kmae"]
