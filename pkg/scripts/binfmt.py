"""
Shared plumbing for the little-endian binary containers (RSSV1 volumes,
PRBW1 weight bundles): error types, a bounds-checked reader and atomic writes.
"""
import json
import os
import struct
import tempfile


class FormatError(ValueError):
    """Base class for malformed or incompatible binary files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class ByteReader:
    def __init__(self, blob, what="file"):
        self.blob = memoryview(blob)
        self.pos = 0
        self.what = what

    @property
    def remaining(self):
        return len(self.blob) - self.pos

    def take(self, n):
        if n < 0 or n > self.remaining:
            raise TruncatedPayloadError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, only {self.remaining} left"
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def expect_magic(self, magic):
        found = bytes(self.take(len(magic))) if self.remaining >= len(magic) else bytes(self.blob)
        if found != magic:
            raise BadMagicError(f"{self.what}: bad magic {found!r}, expected {magic!r}")

    def expect_version(self, supported):
        (version,) = self.unpack("<I")
        if version != supported:
            raise UnsupportedVersionError(f"{self.what}: unsupported version {version} (reader knows {supported})")
        return version

    def read_json(self, max_bytes):
        (length,) = self.unpack("<I")
        if length > max_bytes:
            raise DimensionOverflowError(f"{self.what}: JSON header of {length} bytes exceeds {max_bytes}")
        raw = bytes(self.take(length))
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.what}: corrupt JSON header ({exc})") from exc

    def expect_end(self):
        if self.remaining:
            raise FormatError(f"{self.what}: {self.remaining} trailing bytes after payload")


def pack_json(obj):
    """Canonical JSON bytes prefixed with their u32 length."""
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def read_file(path):
    with open(path, "rb") as f:
        return f.read()


def write_atomic(path, blob):
    """Write through a temp file in the same directory, then rename over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
