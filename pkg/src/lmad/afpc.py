"""AFPC ("affordance point cloud") binary sample format.

Little-endian layout::

    magic   4 bytes  b"AFPC"
    version u32      currently 1
    N       u32      point count
    A       u32      affordance word count
    category         u16 byte-length + UTF-8 bytes
    A names          u16 byte-length + UTF-8 bytes, each
    coords  N*3 f32  row-major (x, y, z)
    masks   A*N u8   one {0,1} byte per point, one block per word

Readers raise :class:`~lmad.errors.FormatError` with the byte offset of the
first problem, so truncated or corrupt files are diagnosable.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .dataset import PointCloudSample
from .errors import FormatError

MAGIC = b"AFPC"
FORMAT_VERSION = 1


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    offset = buf.tell()
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file at byte {offset}: "
                          f"needed {n} bytes for {what}, got {len(data)}")
    return data


def _read_str(buf: io.BufferedIOBase, what: str) -> str:
    (length,) = struct.unpack("<H", _read_exact(buf, 2, f"{what} length"))
    offset = buf.tell()
    raw = _read_exact(buf, length, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"invalid UTF-8 in {what} at byte {offset}: {e}") from None


def _write_str(buf: io.BufferedIOBase, text: str, what: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"{what} too long to encode ({len(raw)} bytes)")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def dump_sample(sample: PointCloudSample) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    n = sample.n_points
    a = len(sample.affordances)
    buf.write(struct.pack("<III", FORMAT_VERSION, n, a))
    _write_str(buf, sample.category, "category")
    for word, _ in sample.affordances:
        _write_str(buf, word, "affordance name")
    buf.write(np.ascontiguousarray(sample.coords, dtype="<f4").tobytes())
    for _, mask in sample.affordances:
        buf.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return buf.getvalue()


def parse_sample(data: bytes) -> PointCloudSample:
    buf = io.BytesIO(data)
    magic = _read_exact(buf, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic at byte 0: expected {MAGIC!r}, got {magic!r}")
    version, n, a = struct.unpack("<III", _read_exact(buf, 12, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} at byte 4 "
                          f"(supported: {FORMAT_VERSION})")
    category = _read_str(buf, "category")
    words = [_read_str(buf, f"affordance name {i}") for i in range(a)]
    coords_off = buf.tell()
    coords = np.frombuffer(_read_exact(buf, n * 12, "coords"), dtype="<f4").reshape(n, 3)
    if not np.isfinite(coords).all():
        bad = int(np.flatnonzero(~np.isfinite(coords).all(axis=1))[0])
        raise FormatError(f"non-finite coordinate in point {bad} "
                          f"(coords block starts at byte {coords_off})")
    affordances = []
    for word in words:
        mask_off = buf.tell()
        mask = np.frombuffer(_read_exact(buf, n, f"mask for {word!r}"), dtype=np.uint8)
        bad = np.flatnonzero(mask > 1)
        if bad.size:
            raise FormatError(f"mask for {word!r} has byte value {mask[bad[0]]} "
                              f"at byte {mask_off + int(bad[0])} (must be 0 or 1)")
        affordances.append((word, mask.copy()))
    trailing = buf.read(1)
    if trailing:
        raise FormatError(f"trailing data at byte {buf.tell() - 1}")
    return PointCloudSample(coords=coords.copy(), category=category,
                            affordances=affordances)


def write_sample(sample: PointCloudSample, path) -> None:
    Path(path).write_bytes(dump_sample(sample))


def read_sample(path) -> PointCloudSample:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from None
    try:
        return parse_sample(data)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None
