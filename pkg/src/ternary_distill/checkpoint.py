"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"BDK1"
    u32 header_len, header: UTF-8 "key=value" lines (model config + metadata)
    u32 n_records
    record * n_records:
        u16 name_len, name (UTF-8)
        u8  dtype tag (0 = f32, 1 = ternary)
        u8  ndim, u32 * ndim shape
        u32 payload_len, payload
        u32 crc32 of every record byte before it

A ternary payload is the absmean scale as f32 followed by the packed 2-bit
codes, so its length is 4 + rows * ceil(cols / 4).
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import BitModel, ModelConfig
from .quant import FormatError, TernaryTensor, unpack_trits

MAGIC = b"BDK1"
TAG_F32 = 0
TAG_TERNARY = 1


class CheckpointFormatError(FormatError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} at offset {offset}")
        self.offset = offset


def _header_text(config: ModelConfig, meta: dict | None) -> bytes:
    lines = [f"{k}={v}" for k, v in config.to_dict().items()]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _record(name: str, arr) -> bytes:
    nb = name.encode("utf-8")
    if isinstance(arr, TernaryTensor):
        tag, shape = TAG_TERNARY, arr.shape
        payload = struct.pack("<f", arr.scale) + np.ascontiguousarray(arr.packed, dtype=np.uint8).tobytes()
    else:
        a = np.ascontiguousarray(arr, dtype="<f4")
        tag, shape, payload = TAG_F32, a.shape, a.tobytes()
    body = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, len(shape))
    body += struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<I", len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def dumps(model: BitModel, meta: dict | None = None) -> bytes:
    header = _header_text(model.config, meta)
    state = model.state_arrays()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        out.write(_record(name, arr))
    return out.getvalue()


def save_checkpoint(model: BitModel, path, meta: dict | None = None) -> int:
    """Write ``model`` to ``path``; returns the byte count."""
    data = dumps(model, meta)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(p)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _parse_header(text: str, offset: int) -> tuple[ModelConfig, dict]:
    cfg, meta = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"malformed header line {line!r}", offset)
        k, v = line.split("=", 1)
        if k.startswith("meta."):
            meta[k[5:]] = v
        else:
            cfg[k] = v
    try:
        return ModelConfig.from_dict(cfg), meta
    except (ValueError, TypeError) as e:
        raise CheckpointFormatError(f"bad header: {e}", offset) from None


def loads(data: bytes) -> tuple[BitModel, dict]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic (expected b'BDK1')", 0)
    (hlen,) = r.unpack("<I", "header length")
    hstart = r.pos
    try:
        text = r.take(hlen, "header").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointFormatError("header is not UTF-8", hstart) from None
    config, meta = _parse_header(text, hstart)
    (n,) = r.unpack("<I", "record count")
    state = {}
    for _ in range(n):
        start = r.pos
        (nlen,) = r.unpack("<H", "record name length")
        name = r.take(nlen, "record name").decode("utf-8", errors="replace")
        tag, ndim = r.unpack("<BB", "record tag")
        shape = r.unpack(f"<{ndim}I", "record shape")
        (plen,) = r.unpack("<I", "payload length")
        pstart = r.pos
        payload = r.take(plen, f"payload of {name!r}")
        (crc,) = r.unpack("<I", "checksum")
        if zlib.crc32(data[start : pstart + plen]) != crc:
            raise CheckpointFormatError(f"checksum mismatch in record {name!r}", start)
        if tag == TAG_F32:
            expect = 4 * int(np.prod(shape, dtype=np.int64))
            if plen != expect:
                raise CheckpointFormatError(f"f32 record {name!r} has {plen} payload bytes, expected {expect}", pstart)
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        elif tag == TAG_TERNARY:
            if ndim != 2:
                raise CheckpointFormatError(f"ternary record {name!r} must be 2-D", start)
            rows, cols = shape
            expect = 4 + rows * ((cols + 3) // 4)
            if plen != expect:
                raise CheckpointFormatError(f"ternary record {name!r} has {plen} payload bytes, expected {expect}", pstart)
            (scale,) = struct.unpack("<f", payload[:4])
            packed = np.frombuffer(payload[4:], dtype=np.uint8).reshape(rows, (cols + 3) // 4).copy()
            try:
                unpack_trits(packed, cols)
            except FormatError as e:
                raise CheckpointFormatError(f"record {name!r}: {e}", pstart + 4) from None
            state[name] = TernaryTensor((rows, cols), packed, float(scale))
        else:
            raise CheckpointFormatError(f"unknown dtype tag {tag} in record {name!r}", start)
    if r.pos != len(data):
        raise CheckpointFormatError(f"{len(data) - r.pos} trailing bytes", r.pos)
    return BitModel(config, state), meta


def load_checkpoint(path) -> tuple[BitModel, dict]:
    """Returns the model and the ``meta.*`` header entries."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return loads(data)


def ternary_payload_len(rows: int, cols: int) -> int:
    return 4 + rows * ((cols + 3) // 4)
