"""File formats: binary PPM/PGM images, SRFT model files, kernel specs, traces."""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .degradation import KernelSpec
from .models import Model, ModelSpec

PathLike = Union[str, os.PathLike]

MAGIC = b"SRFT"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A file could not be decoded."""


# ------------------------------------------------------------------ netpbm


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"unexpected end of header at byte {start}")
    return buf[start:pos], pos


def decode_netpbm(buf: bytes) -> np.ndarray:
    """Decode a P5/P6 image with maxval 255 to a (1, C, H, W) float32 array in [0, 1]."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r} at byte 0: expected P5 or P6")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"bad {name} {tok!r} at byte {pos - len(tok)}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} at byte {pos - len(str(maxval))}: only 255 is supported")
    if w < 1 or h < 1:
        raise FormatError(f"invalid image size {w}x{h}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"missing whitespace after header at byte {pos}")
    pos += 1
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated payload at byte {pos + len(payload)}: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return (arr.astype(np.float32) / np.float32(255.0))[None]


def quantize(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half away from zero to 8-bit."""
    v = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def encode_netpbm(x: np.ndarray) -> bytes:
    """Encode a (1, C, H, W) or (C, H, W) array; C=3 gives P6, C=1 gives P5."""
    a = np.asarray(x)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError(f"can only save a single image, got batch of {a.shape[0]}")
        a = a[0]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got shape {a.shape}")
    c, h, w = a.shape
    magic = b"P6" if c == 3 else b"P5"
    body = quantize(a).transpose(1, 2, 0).tobytes()
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + body


def load_image(path: PathLike) -> np.ndarray:
    try:
        return decode_netpbm(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_image(x: np.ndarray, path: PathLike) -> None:
    Path(path).write_bytes(encode_netpbm(x))


# ------------------------------------------------------------------ models


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_model(model: Model) -> bytes:
    """Layout: magic, u16 version, length-prefixed spec record, then until EOF
    per parameter: length-prefixed name, u8 rank, u32 dims, float32 LE values."""
    record = f"{model.spec.to_text()} dropout_p={model.dropout_p!r}"
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION), _pack_str(record)]
    for name, arr in model.params.items():
        out.append(_pack_str(name))
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated model file while reading {what} at byte {self.pos}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", f"{what} length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8") from None


def decode_model(buf: bytes) -> Model:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}: expected {MAGIC.decode()!r} (not an SRFT model file)")
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}: expected {FORMAT_VERSION}")
    record = r.string("model spec")
    try:
        fields = dict(tok.split("=", 1) for tok in record.split())
        dropout_p = float(fields.pop("dropout_p", 0.0))
        spec = ModelSpec.from_text(" ".join(f"{k}={v}" for k, v in fields.items()))
    except ValueError as exc:
        raise FormatError(f"bad model spec record {record!r}: {exc}") from None
    params = {}
    while r.pos < len(buf):
        name = r.string("parameter name")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    return Model(spec, params, dropout_p)


def save_model(model: Model, path: PathLike) -> None:
    Path(path).write_bytes(encode_model(model))


def load_model(path: PathLike) -> Model:
    try:
        return decode_model(Path(path).read_bytes())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ------------------------------------------------------------------ kernels


def load_kernel(path_or_text: str) -> KernelSpec:
    """Read a kernel spec from a file, or parse it inline if no such file exists."""
    p = Path(path_or_text)
    text = p.read_text() if p.is_file() else path_or_text
    return KernelSpec.from_text(text)


def save_kernel(spec: KernelSpec, path: PathLike) -> None:
    Path(path).write_text(spec.to_text())
