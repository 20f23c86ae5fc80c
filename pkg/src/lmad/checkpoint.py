"""Binary model checkpoints: a config JSON blob plus named flat tensors.

Little-endian layout::

    magic    8 bytes  b"LMADCKPT"
    version  u32      currently 1
    config   u32 byte-length + UTF-8 JSON (sorted keys, so bytes are stable)
    count    u32      number of tensors
    per tensor:
        name   u16 byte-length + UTF-8
        dtype  u8   0 = float32, 1 = float64
        rank   u8
        dims   u32 × rank
        data   raw little-endian values, C order

``save → load → save`` is byte-identical; every array round-trips bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import Model, ModelConfig

MAGIC = b"LMADCKPT"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read_exact(buf: io.BufferedIOBase, n: int, what: str) -> bytes:
    offset = buf.tell()
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint at byte {offset}: "
                          f"needed {n} bytes for {what}, got {len(data)}")
    return data


def dump_checkpoint(config: dict, state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} rank {arr.ndim} too large")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        code = _DTYPE_CODES[arr.dtype]
        buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    buf = io.BytesIO(data)
    magic = _read_exact(buf, 8, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic at byte 0: expected {MAGIC!r}, got {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 8")
    (blob_len,) = struct.unpack("<I", _read_exact(buf, 4, "config length"))
    blob_off = buf.tell()
    blob = _read_exact(buf, blob_len, "config blob")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid config JSON at byte {blob_off}: {e}") from None
    (count,) = struct.unpack("<I", _read_exact(buf, 4, "tensor count"))
    state: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(buf, 2, f"tensor {i} name length"))
        name = _read_exact(buf, name_len, f"tensor {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", _read_exact(buf, 2, f"tensor {name!r} header"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code} "
                              f"at byte {buf.tell() - 2}")
        dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank, f"tensor {name!r} dims"))
        n_bytes = int(np.prod(dims, dtype=np.int64)) * _CODE_DTYPES[code].itemsize
        raw = _read_exact(buf, n_bytes, f"tensor {name!r} data")
        if name in state:
            raise FormatError(f"duplicate tensor name {name!r}")
        state[name] = np.frombuffer(raw, dtype=_CODE_DTYPES[code]).reshape(dims).copy()
    trailing = buf.read(1)
    if trailing:
        raise FormatError(f"trailing data at byte {buf.tell() - 1}")
    return config, state


def save_checkpoint(path, model: Model) -> None:
    Path(path).write_bytes(dump_checkpoint(model.cfg.to_dict(), model.state_dict()))


def load_model(path, dtype=None) -> Model:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read {path}: {e}") from None
    try:
        config, state = parse_checkpoint(data)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None
    if dtype is None:
        # Parameters are homogeneous; recover the precision they were saved in.
        widest = max((a.dtype.itemsize for a in state.values()), default=4)
        dtype = np.float64 if widest == 8 else np.float32
    model = Model(ModelConfig.from_dict(config), seed=0, dtype=dtype)
    model.load_state_dict(state)
    return model
