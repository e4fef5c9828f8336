"""On-disk formats: the FLEXCKPT checkpoint container and netpbm images.

Checkpoint layout: magic "FLEXCKPT", version u32, then records until EOF.
Each record is name length (u32 LE), UTF-8 name, rank (u32), dims (u32 each),
and a float32 little-endian payload of prod(dims) values (rank 0 = one
scalar). Non-tensor metadata (config JSON, step counter) travels as ordinary
records: text is stored as an f32 array of byte values, which keeps the wire
format uniform and round-trips exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"FLEXCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint; message carries the byte offset."""


def write_checkpoint(path, records: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype=np.float32)
        nbytes = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nbytes)))
        chunks.append(nbytes)
        chunks.append(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            chunks.append(struct.pack("<I", d))
        chunks.append(arr.astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4:
        raise CheckpointError(f"truncated header at offset {len(data)}")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic at offset 0")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset {len(MAGIC)}")
    pos = len(MAGIC) + 4
    records: Dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if pos + n > len(data):
            raise CheckpointError(f"truncated {what} at offset {pos}")

    while pos < len(data):
        need(4, "record name length")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        need(nlen, "record name")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        need(4, "record rank")
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = []
        for _ in range(rank):
            need(4, "record dims")
            (d,) = struct.unpack_from("<I", data, pos)
            dims.append(d)
            pos += 4
        count = 1
        for d in dims:
            count *= d
        need(4 * count, f"payload of {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        records[name] = arr.astype(np.float32)
    return records


def encode_text(text: str) -> np.ndarray:
    """Text as an f32 array of byte values (exact round trip)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")


def encode_json(obj) -> np.ndarray:
    return encode_text(json.dumps(obj, sort_keys=True, separators=(",", ":")))


def decode_json(arr: np.ndarray):
    return json.loads(decode_text(arr))


# ----------------------------------------------------------------------
# netpbm images
# ----------------------------------------------------------------------

def to_pixels(img: np.ndarray) -> np.ndarray:
    """Linear [-1, 1] -> [0, 255] with rounding and clipping."""
    arr = (np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * 255.0
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def from_pixels(pix: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1] float32."""
    return (np.asarray(pix, dtype=np.float32) / 255.0) * 2.0 - 1.0


def unit_to_pixels(img: np.ndarray) -> np.ndarray:
    """Linear [0, 1] -> [0, 255] (for condition maps)."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def pixels_to_unit(pix: np.ndarray) -> np.ndarray:
    return np.asarray(pix, dtype=np.float32) / 255.0


def write_pgm(path, pix: np.ndarray) -> None:
    pix = np.asarray(pix, dtype=np.uint8)
    if pix.ndim != 2:
        raise ValueError(f"PGM wants (H, W), got {pix.shape}")
    h, w = pix.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def write_ppm(path, pix: np.ndarray) -> None:
    pix = np.asarray(pix, dtype=np.uint8)
    if pix.ndim != 3 or pix.shape[2] != 3:
        raise ValueError(f"PPM wants (H, W, 3), got {pix.shape}")
    h, w, _ = pix.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pix.tobytes())


def _parse_netpbm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    if not data.startswith(magic):
        raise ValueError(f"expected {magic.decode()} image")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # the single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    count = w * h * channels
    raw = data[pos : pos + count]
    if len(raw) != count:
        raise ValueError(f"short pixel payload: {len(raw)} of {count} bytes")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, channels))


def read_pgm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _parse_netpbm(Path(path).read_bytes(), b"P6", 3)
