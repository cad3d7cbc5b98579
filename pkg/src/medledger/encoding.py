"""Canonical byte encoding shared by signing, hashing, and storage formats.

Every field is rendered as a big-endian length-prefixed byte string (u32
length + payload), concatenated in declaration order. Collections carry a
count prefix; optional fields carry a one-byte presence marker. Decoding is
strict: trailing bytes, truncated prefixes, or oversized lengths raise.
"""

from __future__ import annotations

from typing import Iterator

MAX_FIELD_LEN = 1 << 24  # sanity bound for a desk-scale artifact


class DecodeError(ValueError):
    """Raised when a canonical byte stream is malformed."""


def enc_bytes(value: bytes) -> bytes:
    if len(value) >= MAX_FIELD_LEN:
        raise ValueError("field too large")
    return len(value).to_bytes(4, "big") + value


def enc_u64(value: int) -> bytes:
    if value < 0 or value >= 1 << 64:
        raise ValueError("u64 out of range")
    return enc_bytes(value.to_bytes(8, "big"))


def enc_str(value: str) -> bytes:
    return enc_bytes(value.encode("utf-8"))


def enc_bool(value: bool) -> bytes:
    return enc_bytes(b"\x01" if value else b"\x00")


def enc_opt_str(value: str | None) -> bytes:
    if value is None:
        return enc_bytes(b"")
    return enc_bytes(b"\x01" + value.encode("utf-8"))


def enc_str_map(value: dict[str, str]) -> bytes:
    out = [enc_u64(len(value))]
    for key in sorted(value):
        out.append(enc_str(key))
        out.append(enc_str(value[key]))
    return b"".join(out)


def enc_count_map(value: dict[str, int]) -> bytes:
    out = [enc_u64(len(value))]
    for key in sorted(value):
        out.append(enc_str(key))
        out.append(enc_u64(value[key]))
    return b"".join(out)


def to_hex(value: bytes) -> str:
    return value.hex()


def from_hex(value: str) -> bytes:
    try:
        return bytes.fromhex(value)
    except ValueError as exc:
        raise DecodeError(f"bad hex string: {value!r}") from exc


class Reader:
    """Sequential decoder for the canonical encoding."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read_bytes(self) -> bytes:
        if self._pos + 4 > len(self._data):
            raise DecodeError("truncated length prefix")
        length = int.from_bytes(self._data[self._pos : self._pos + 4], "big")
        if length >= MAX_FIELD_LEN:
            raise DecodeError("field length out of range")
        start = self._pos + 4
        end = start + length
        if end > len(self._data):
            raise DecodeError("truncated field")
        self._pos = end
        return self._data[start:end]

    def read_u64(self) -> int:
        raw = self.read_bytes()
        if len(raw) != 8:
            raise DecodeError("bad u64 width")
        return int.from_bytes(raw, "big")

    def read_str(self) -> str:
        try:
            return self.read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("bad utf-8") from exc

    def read_bool(self) -> bool:
        raw = self.read_bytes()
        if raw == b"\x01":
            return True
        if raw == b"\x00":
            return False
        raise DecodeError("bad bool")

    def read_opt_str(self) -> str | None:
        raw = self.read_bytes()
        if raw == b"":
            return None
        if raw[:1] != b"\x01":
            raise DecodeError("bad optional marker")
        try:
            return raw[1:].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("bad utf-8") from exc

    def read_str_map(self) -> dict[str, str]:
        count = self.read_u64()
        out: dict[str, str] = {}
        for _ in range(count):
            key = self.read_str()
            out[key] = self.read_str()
        return out

    def read_count_map(self) -> dict[str, int]:
        count = self.read_u64()
        out: dict[str, int] = {}
        for _ in range(count):
            key = self.read_str()
            out[key] = self.read_u64()
        return out

    def read_fixed(self, width: int) -> bytes:
        raw = self.read_bytes()
        if len(raw) != width:
            raise DecodeError(f"expected {width}-byte field, got {len(raw)}")
        return raw

    def items(self, count: int) -> Iterator[bytes]:
        for _ in range(count):
            yield self.read_bytes()

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError("trailing bytes")

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)
