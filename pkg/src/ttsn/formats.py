"""Shared helpers for the binary clip-container and checkpoint formats."""

from __future__ import annotations

import struct
from typing import BinaryIO


class FormatError(ValueError):
    """A binary file does not conform to its declared format."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated file: expected {n} bytes for {what}, "
                                 f"got {len(buf)}")
    return buf


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise BadMagicError(f"bad magic {got!r}, expected {magic!r}")


def expect_version(f: BinaryIO, version: int) -> None:
    got = read_u32(f, "version")
    if got != version:
        raise VersionMismatchError(f"unsupported format version {got}, expected {version}")


def read_u32(f: BinaryIO, what: str) -> int:
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def read_u64(f: BinaryIO, what: str) -> int:
    return struct.unpack("<Q", read_exact(f, 8, what))[0]


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def write_u64(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<Q", value))
