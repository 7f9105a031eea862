"""PNG images, the SPMM weights container and strict run configs.

SPMM layout (all integers little-endian)::

    b"SPMM" | u16 version | u32 manifest length | manifest (UTF-8 JSON)
    | zero fill to a 64-byte boundary | tensor payloads, each starting on a
    64-byte boundary | u32 CRC32 of everything between the manifest and the CRC

The manifest is ``{"tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}``
with sorted keys and tensors in name order; ``offset`` is absolute in the file.
"""
from __future__ import annotations

import dataclasses
import io as _io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .model import ModelConfig
from .weights import WeightTree

MAGIC = b"SPMM"
VERSION = 1
ALIGN = 64
_HEAD = struct.Struct("<4sHI")
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


# -- PNG ---------------------------------------------------------------------------

PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _check_png(data: bytes) -> None:
    """Walk the chunk list, verifying lengths and CRCs, and reject unsupported headers."""
    if data[:8] != PNG_SIG:
        raise FormatError("not a PNG signature", 0)
    pos, seen_end, first = 8, False, True
    while pos < len(data):
        if pos + 8 > len(data):
            raise FormatError("truncated chunk header", pos)
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        end = pos + 12 + length
        if end > len(data):
            raise FormatError(f"truncated {ctype!r} chunk", pos)
        body = data[pos + 8:pos + 8 + length]
        (crc,) = struct.unpack(">I", data[end - 4:end])
        if zlib.crc32(ctype + body) != crc:
            raise FormatError(f"CRC mismatch in {ctype!r} chunk", pos)
        if first:
            if ctype != b"IHDR" or length != 13:
                raise FormatError("first chunk must be a 13-byte IHDR", pos)
            depth, color = body[8], body[9]
            if depth != 8:
                raise FormatError(f"unsupported bit depth {depth}; only 8-bit images are read",
                                  pos + 16)
            if color not in (0, 2, 4, 6):
                raise FormatError(f"unsupported colour type {color}", pos + 17)
            first = False
        if ctype == b"IEND":
            seen_end = True
            break
        pos = end
    if not seen_end:
        raise FormatError("missing IEND chunk", len(data))


def png_decode(data: bytes) -> np.ndarray:
    """PNG bytes -> [H, W, 3] uint8. Grey is replicated to three channels; alpha is dropped."""
    _check_png(data)
    try:
        with Image.open(_io.BytesIO(data)) as im:
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"corrupt image data: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.shape[2] == 2:
        arr = np.repeat(arr[:, :, :1], 3, axis=2)
    return np.ascontiguousarray(arr[:, :, :3], dtype=np.uint8)


def png_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return png_decode(fh.read())


def png_write(path, img) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"png_write needs uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected [H, W] or [H, W, 3], got {img.shape}")
    Image.fromarray(img).save(path, format="PNG")


def to_float(img_u8: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[H, W, 3] uint8 -> [3, H, W] in [0, 1]."""
    return (img_u8.astype(np.float64) / 255.0).transpose(2, 0, 1).astype(dtype)


def to_u8(chw) -> np.ndarray:
    """[3, H, W] in [0, 1] -> [H, W, 3] uint8 (clipped, rounded half to even)."""
    x = np.clip(np.asarray(chw, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0).copy()


# -- weights -----------------------------------------------------------------------

def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def dumps_weights(tree) -> bytes:
    names = sorted(tree)
    arrays = []
    for name in names:
        a = np.asarray(tree[name])
        key = a.dtype.newbyteorder("<").str
        if key not in _DTYPES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {a.dtype}")
        arrays.append((name, a.astype(key, order="C")))
    # offsets depend on the manifest length; iterate until the layout is stable
    start = 0
    while True:
        entries, pos = [], start
        for name, a in arrays:
            pos = _align(pos)
            entries.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                            "offset": pos, "nbytes": a.nbytes})
            pos += a.nbytes
        manifest = json.dumps({"tensors": entries}, sort_keys=True,
                              separators=(",", ":")).encode()
        new_start = _align(_HEAD.size + len(manifest))
        if new_start == start:
            break
        start = new_start
    buf = bytearray(_HEAD.pack(MAGIC, VERSION, len(manifest)) + manifest)
    buf.extend(b"\0" * (start - len(buf)))
    for e, (_, a) in zip(entries, arrays):
        buf.extend(b"\0" * (e["offset"] - len(buf)))
        buf.extend(a.tobytes())
    crc = zlib.crc32(bytes(buf[start:]))
    buf.extend(struct.pack("<I", crc))
    return bytes(buf)


def loads_weights(data: bytes) -> WeightTree:
    if len(data) < _HEAD.size:
        raise FormatError("file shorter than the header", 0)
    magic, version, mlen = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported weights version {version} (this build reads {VERSION})", 4)
    mend = _HEAD.size + mlen
    if mend > len(data):
        raise FormatError("truncated manifest", _HEAD.size)
    try:
        manifest = json.loads(data[_HEAD.size:mend].decode())
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}", _HEAD.size) from exc
    start = _align(mend)
    if len(data) < start + 4:
        raise FormatError("truncated payload", len(data))
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[start:-4]) != crc:
        raise FormatError("payload CRC32 mismatch", len(data) - 4)
    tree, last = WeightTree(), start
    for e in entries:
        off, nbytes, dt = e["offset"], e["nbytes"], e["dtype"]
        if dt not in _DTYPES:
            raise FormatError(f"tensor {e['name']!r}: unknown dtype {dt!r}", _HEAD.size)
        if off % ALIGN or off < last or off + nbytes > len(data) - 4:
            raise FormatError(f"tensor {e['name']!r}: bad offset {off}", _HEAD.size)
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if count * np.dtype(dt).itemsize != nbytes:
            raise FormatError(f"tensor {e['name']!r}: size does not match shape", _HEAD.size)
        arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
        tree[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        last = off + nbytes
    return tree


def save_weights(tree, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_weights(tree))


def load_weights(path) -> WeightTree:
    with open(path, "rb") as fh:
        return loads_weights(fh.read())


# -- run configs ---------------------------------------------------------------------

@dataclass
class RunConfig:
    """Experiment settings read from JSON. Unknown keys are errors.

    ``model`` holds :class:`ModelConfig` overrides applied on top of ``preset``.
    """

    preset: str = "T"
    scale: int = 4
    seed: int = 0
    steps: int = 200
    lr: float = 2e-3
    lam_freq: float = 0.05
    self_ensemble: bool = False
    model: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ValueError(f"unknown config keys: {', '.join(extra)}")
        model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
        bad = sorted(set(d.get("model", {})) - model_keys)
        if bad:
            raise ValueError(f"unknown model keys: {', '.join(bad)}")
        return cls(**d)

    def model_config(self) -> ModelConfig:
        from .model import preset
        return preset(self.preset, self.scale, **self.model)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))
