import pytest
from hypothesis import given
from hypothesis import strategies as st

from medledger.encoding import (
    DecodeError,
    Reader,
    enc_bool,
    enc_bytes,
    enc_count_map,
    enc_opt_str,
    enc_str,
    enc_str_map,
    enc_u64,
)


@given(st.binary(max_size=256))
def test_bytes_roundtrip(value):
    r = Reader(enc_bytes(value))
    assert r.read_bytes() == value
    r.expect_end()


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_u64_roundtrip(value):
    assert Reader(enc_u64(value)).read_u64() == value


@given(st.text(max_size=64))
def test_str_roundtrip(value):
    assert Reader(enc_str(value)).read_str() == value


@given(st.dictionaries(st.text(max_size=8), st.text(max_size=8), max_size=6))
def test_str_map_roundtrip(value):
    assert Reader(enc_str_map(value)).read_str_map() == value


@given(st.dictionaries(st.text(max_size=8), st.integers(min_value=0, max_value=10**9), max_size=6))
def test_count_map_roundtrip(value):
    assert Reader(enc_count_map(value)).read_count_map() == value


@pytest.mark.parametrize("value", [None, "", "free text"])
def test_opt_str_roundtrip(value):
    assert Reader(enc_opt_str(value)).read_opt_str() == value


def test_bool_roundtrip():
    assert Reader(enc_bool(True)).read_bool() is True
    assert Reader(enc_bool(False)).read_bool() is False


def test_map_encoding_is_key_sorted():
    assert enc_str_map({"b": "2", "a": "1"}) == enc_str_map({"a": "1", "b": "2"})


def test_truncated_prefix_rejected():
    with pytest.raises(DecodeError):
        Reader(b"\x00\x00\x00").read_bytes()


def test_truncated_field_rejected():
    with pytest.raises(DecodeError):
        Reader(b"\x00\x00\x00\x05abc").read_bytes()


def test_trailing_bytes_rejected():
    r = Reader(enc_bytes(b"x") + b"junk")
    r.read_bytes()
    with pytest.raises(DecodeError):
        r.expect_end()


def test_fixed_width_enforced():
    with pytest.raises(DecodeError):
        Reader(enc_bytes(b"abc")).read_fixed(32)


def test_negative_u64_rejected():
    with pytest.raises(ValueError):
        enc_u64(-1)
