"""Checkpoint and metadata serialization.

Layout (all integers little-endian):

    magic     8 bytes  b"DIALSTM1"
    meta_len  u32      byte length of the metadata block
    meta      UTF-8    one "key=value" pair per line; values escape
                       backslash as \\\\ and newline as \\n
    blobs     repeated to EOF:
        name_len  u16
        name      UTF-8 bytes
        count     u64   element count
        values    count * f32

Parameter blobs appear in declaration order, then BatchNorm running
statistics. Values are stored in 32-bit; computation stays 64-bit, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

MAGIC = b"DIALSTM1"


def escape_value(value: str) -> str:
    return value.replace("\\", "\\\\").replace("\n", "\\n")


def unescape_value(value: str) -> str:
    out = []
    i = 0
    while i < len(value):
        ch = value[i]
        if ch == "\\" and i + 1 < len(value):
            nxt = value[i + 1]
            out.append("\n" if nxt == "n" else nxt)
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def encode_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for key, value in meta.items():
        if "=" in key or "\n" in key:
            raise FormatError(f"metadata key {key!r} may not contain '=' or newline")
        lines.append(f"{key}={escape_value(str(value))}")
    return ("\n".join(lines) + "\n" if lines else "").encode("utf-8")


def decode_meta(blob: bytes) -> dict[str, str]:
    meta: dict[str, str] = {}
    for lineno, line in enumerate(blob.decode("utf-8").splitlines(), 1):
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"metadata line {lineno} has no '=': {line!r}")
        key, _, value = line.partition("=")
        meta[key] = unescape_value(value)
    return meta


@dataclass
class Checkpoint:
    meta: dict[str, str]
    arrays: dict[str, np.ndarray]  # float32, in file order


def write_blob_file(path, meta: dict[str, str], arrays: dict[str, np.ndarray],
                    magic: bytes = MAGIC) -> None:
    meta_bytes = encode_meta(meta)
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        for name, arr in arrays.items():
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise FormatError(f"blob name too long: {name!r}")
            values = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<H", len(name_bytes)))
            f.write(name_bytes)
            f.write(struct.pack("<Q", values.size))
            f.write(values.tobytes())


def read_blob_file(path, magic: bytes = MAGIC) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (meta_len,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    if pos + meta_len > len(raw):
        raise FormatError(f"{path}: metadata length {meta_len} overruns file")
    meta = decode_meta(raw[pos:pos + meta_len])
    pos += meta_len

    arrays: dict[str, np.ndarray] = {}
    while pos < len(raw):
        if pos + 2 > len(raw):
            raise FormatError(f"{path}: truncated blob header at byte {pos}")
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 8 > len(raw):
            raise FormatError(f"{path}: truncated element count for {name!r}")
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        nbytes = count * 4
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: blob {name!r} overruns file")
        arrays[name] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f4").copy()
        pos += nbytes
    return meta, arrays


def save_checkpoint(path, model, meta: dict[str, str]) -> None:
    """Serialize model parameters + BN running stats with metadata."""
    meta = dict(meta)
    meta.setdefault("format_version", "1")
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        arrays[name] = p.data.astype(np.float32).reshape(-1)
    for name, buf in model.buffers().items():
        arrays[name] = buf.astype(np.float32).reshape(-1)
    write_blob_file(path, meta, arrays)


def resave_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write a loaded checkpoint back out (bytes must round-trip)."""
    write_blob_file(path, checkpoint.meta, checkpoint.arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays = read_blob_file(path)
    return Checkpoint(meta=meta, arrays=arrays)


def apply_checkpoint(model, checkpoint: Checkpoint) -> None:
    """Copy checkpoint arrays into an already-built model, by name."""
    params = model.parameters()
    buffers = model.buffers()
    for name, arr in checkpoint.arrays.items():
        if name in params:
            target = params[name]
            if target.data.size != arr.size:
                raise FormatError(f"checkpoint blob {name!r} has {arr.size} elements, "
                                  f"model expects {target.data.size}")
            target.data = arr.astype(np.float64).reshape(target.data.shape)
        elif name in buffers:
            buf = buffers[name]
            if buf.size != arr.size:
                raise FormatError(f"checkpoint buffer {name!r} has {arr.size} elements, "
                                  f"model expects {buf.size}")
            buf[...] = arr.astype(np.float64).reshape(buf.shape)
        else:
            raise FormatError(f"checkpoint blob {name!r} not present in model")
    missing = [n for n in params if n not in checkpoint.arrays]
    if missing:
        raise FormatError(f"checkpoint is missing parameters: {missing[:3]}...")
