import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlaser.model import ModelConfig, ParamSet, init_params
from fedlaser.wire import (BadMagicError, ChecksumError, TruncatedError, VersionError,
                           WireFormatError, deserialize_params, load_params, save_params,
                           serialize_params)

SHAPES = [("a", (2, 3)), ("b", (4,)), ("scalar", ())]


def _vec(rng):
    return rng.normal(size=11) * 10.0 ** rng.integers(-5, 5, size=11)


def _recrc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_header_bytes():
    blob = serialize_params(np.array([1.5]), [("x", (1,))])
    assert blob[:4] == b"FLLP"
    assert struct.unpack_from("<HI", blob, 4) == (1, 1)
    assert struct.unpack_from("<H", blob, 10) == (1,) and blob[12:13] == b"x"
    assert blob[13] == 1 and struct.unpack_from("<I", blob, 14) == (1,)
    assert struct.unpack_from("<d", blob, 18) == (1.5,)
    assert len(blob) == 18 + 8 + 4


def test_empty_parameter_list_is_header_only():
    blob = serialize_params(np.zeros(0), [])
    assert len(blob) == 4 + 2 + 4 + 4
    vec, shapes = deserialize_params(blob)
    assert vec.size == 0 and shapes == []


def test_round_trip_1000_bit_exact():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = _vec(rng)
        out, shapes = deserialize_params(serialize_params(v, SHAPES))
        assert out.tobytes() == v.tobytes()
        assert shapes == SHAPES


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=11, max_size=11))
def test_round_trip_property(xs):
    v = np.array(xs)
    assert deserialize_params(serialize_params(v, SHAPES))[0].tobytes() == v.tobytes()


def test_every_single_byte_corruption_detected():
    blob = serialize_params(_vec(np.random.default_rng(1)), SHAPES)
    for i in range(len(blob)):
        for flip in (0x01, 0x80, 0xFF):
            bad = bytearray(blob)
            bad[i] ^= flip
            with pytest.raises(ChecksumError):
                deserialize_params(bytes(bad))


def test_distinct_errors():
    blob = serialize_params(np.ones(11), SHAPES)
    body = blob[:-4]
    with pytest.raises(BadMagicError):
        deserialize_params(_recrc(b"XXXX" + body[4:]))
    with pytest.raises(VersionError):
        deserialize_params(_recrc(body[:4] + struct.pack("<H", 2) + body[6:]))
    with pytest.raises(TruncatedError):
        deserialize_params(blob[:7])
    # valid checksum over a body that ends mid-record
    with pytest.raises(TruncatedError):
        deserialize_params(_recrc(body[:-8]))
    with pytest.raises(ChecksumError):
        deserialize_params(blob[:-1])
    for cls in (BadMagicError, VersionError, TruncatedError, ChecksumError):
        assert issubclass(cls, WireFormatError)


def test_trailing_garbage_rejected():
    body = serialize_params(np.ones(11), SHAPES)[:-4]
    with pytest.raises(WireFormatError):
        deserialize_params(_recrc(body + b"\x00"))


def test_non_finite_refused():
    with pytest.raises(WireFormatError):
        serialize_params(np.array([np.nan]), [("x", (1,))])


def test_layout_mismatch():
    with pytest.raises(WireFormatError):
        serialize_params(np.ones(3), [("x", (2,))])


def test_model_file_round_trip(tmp_path):
    p = init_params(ModelConfig(), np.random.default_rng(0))
    path = tmp_path / "model.fllp"
    save_params(path, p)
    q = load_params(path)
    assert isinstance(q, ParamSet)
    assert q.layout == p.layout
    assert q.flatten().tobytes() == p.flatten().tobytes()
