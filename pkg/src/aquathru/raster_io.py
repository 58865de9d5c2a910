"""Raster types and binary PPM / PGM / PFM codecs.

All intensities are treated as *linear*. Nothing here decodes or applies a
gamma curve; gamma-encoded (sRGB) files must be linearised by the caller
before they reach the formation or restoration code.

Range and confidence rasters are held as float64 in memory. PFM stores
float32, so a write/read round trip is bit-exact only for values that are
representable in float32 (anything that was itself read from a PFM is).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np


class FormatError(ValueError):
    """Malformed raster file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RgbImage:
    """H x W x 3 linear RGB raster with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or a.shape[2] != 3:
            raise ValueError(f"RgbImage needs shape (H, W, 3), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("RgbImage values must be finite")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise ValueError("RgbImage values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True, eq=False)
class RangeMap:
    """Line-of-sight distance in meters with an explicit validity mask.

    Invalid pixels hold 0.0 in ``data`` so arithmetic never meets NaN; the
    NaN sentinel only exists on disk.
    """

    data: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"RangeMap needs shape (H, W), got {a.shape}")
        if self.valid is None:
            valid = np.isfinite(a)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != a.shape:
                raise ValueError("validity mask shape does not match range data")
            valid = valid & np.isfinite(a)
        if np.any(a[valid] < 0.0):
            raise ValueError("valid range values must be >= 0")
        a = np.where(valid, a, 0.0)
        object.__setattr__(self, "data", _frozen(a))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_nan(self) -> np.ndarray:
        """Float copy with NaN at invalid pixels (the on-disk encoding)."""
        return np.where(self.valid, self.data, np.nan)


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"ConfidenceMap needs shape (H, W), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("confidence values must be finite")
        if a.size and (a.min() < 0.0 or a.max() > 1.0):
            raise ValueError("confidence values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class DepthMask:
    data: np.ndarray
    coverage: float = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2:
            raise ValueError(f"DepthMask needs shape (H, W), got {a.shape}")
        a = a.astype(bool)
        object.__setattr__(self, "data", _frozen(a))
        object.__setattr__(self, "coverage", float(a.mean()) if a.size else 0.0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


# ---------------------------------------------------------------------------
# Netpbm header parsing

_WS = b" \t\n\r\v\f"


def _header_tokens(buf: bytes, magic: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` integer tokens after ``magic``; return them and the payload offset."""
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    pos = 2
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        if pos >= n:
            raise FormatError("header ended early", pos)
        c = buf[pos : pos + 1]
        if c[0] in _WS:
            pos += 1
            continue
        if c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment", pos)
            pos = end + 1
            continue
        start = pos
        while pos < n and buf[pos] not in _WS and buf[pos : pos + 1] != b"#":
            pos += 1
        tok = buf[start:pos]
        if not tok.isdigit() or len(tok) > 12:
            raise FormatError(f"expected an unsigned integer, got {tok[:16]!r}", start)
        tokens.append(int(tok))
    # exactly one whitespace byte separates header from payload
    if pos >= n or buf[pos] not in _WS:
        raise FormatError("missing whitespace after header", pos)
    return tokens, pos + 1


def _read_netpbm(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    buf = bytes(buf)
    (width, height, maxval), off = _header_tokens(buf, magic, 3)
    if width == 0 or height == 0:
        raise FormatError(f"empty raster {width}x{height}", 2)
    if maxval not in (255, 65535):
        raise FormatError(f"maxval {maxval} not in {{255, 65535}}", off - 1)
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    have = len(buf) - off
    if have < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {have}", len(buf))
    samples = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=off)
    return samples.reshape(height, width, channels).astype(np.float64) / maxval


def read_ppm(buf: bytes) -> RgbImage:
    """Decode a binary P6 image into an :class:`RgbImage`."""
    return RgbImage(_read_netpbm(buf, b"P6", 3))


def _quantize(a: np.ndarray, maxval: int) -> np.ndarray:
    if maxval not in (255, 65535):
        raise ValueError(f"maxval must be 255 or 65535, got {maxval}")
    q = np.rint(np.clip(a, 0.0, 1.0) * maxval)
    return q.astype(">u2" if maxval == 65535 else "u1")


def write_ppm(img: RgbImage, maxval: int = 65535) -> bytes:
    h, w = img.shape
    header = f"P6\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + _quantize(img.data, maxval).tobytes()


def read_pgm(buf: bytes) -> np.ndarray:
    """Decode a binary P5 image into an (H, W) float array in [0, 1]."""
    return _read_netpbm(buf, b"P5", 1)[:, :, 0]


def write_pgm(values: np.ndarray, maxval: int = 255) -> bytes:
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"PGM needs a non-empty (H, W) array, got {a.shape}")
    h, w = a.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    return header + _quantize(a, maxval).tobytes()


def read_mask(buf: bytes) -> DepthMask:
    """Masks are stored as 8-bit PGM: 255 keeps a pixel, 0 drops it (read as >= 128)."""
    return DepthMask(read_pgm(buf) > 0.5)


def write_mask(mask: DepthMask) -> bytes:
    return write_pgm(mask.data.astype(np.float64))


# ---------------------------------------------------------------------------
# PFM

_PFM_DIMS = re.compile(rb"^(\d{1,9}) (\d{1,9})$")


def _pfm_line(buf: bytes, pos: int) -> tuple[bytes, int]:
    end = buf.find(b"\n", pos, pos + 256)
    if end < 0:
        raise FormatError("unterminated PFM header line", pos)
    return buf[pos:end].rstrip(b"\r"), end + 1


def read_pfm(buf: bytes) -> np.ndarray:
    """Decode a grayscale ``Pf`` file into a top-to-bottom float64 array.

    NaN samples are kept as NaN; wrap the result in :class:`RangeMap` to turn
    them into invalid pixels. Colour ``PF`` files are rejected.
    """
    return _decode_pfm(buf)[0]


def _sample_offset(pos: int, shape, row: int, col: int) -> int:
    """Byte offset of a top-down (row, col) sample in a bottom-up PFM payload."""
    h, w = shape
    return pos + 4 * ((h - 1 - row) * w + col)


def _decode_pfm(buf: bytes) -> tuple[np.ndarray, int]:
    buf = bytes(buf)
    magic, pos = _pfm_line(buf, 0)
    if magic == b"PF":
        raise FormatError("colour PFM (PF) where a single-channel map (Pf) is required", 0)
    if magic != b"Pf":
        raise FormatError(f"bad magic {magic[:8]!r}, expected b'Pf'", 0)
    dims_at = pos
    dims, pos = _pfm_line(buf, pos)
    m = _PFM_DIMS.match(dims.strip())
    if not m:
        raise FormatError(f"bad dimension line {dims[:32]!r}", dims_at)
    width, height = int(m.group(1)), int(m.group(2))
    if width == 0 or height == 0:
        raise FormatError(f"empty raster {width}x{height}", dims_at)
    scale_at = pos
    scale_line, pos = _pfm_line(buf, pos)
    try:
        scale = float(scale_line.decode("ascii").strip())
    except (UnicodeDecodeError, ValueError):
        raise FormatError(f"bad scale line {scale_line[:32]!r}", scale_at) from None
    if not np.isfinite(scale) or scale == 0.0:
        raise FormatError(f"scale must be finite and nonzero, got {scale}", scale_at)
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = width * height * 4
    have = len(buf) - pos
    if have < need:
        raise FormatError(f"payload truncated: need {need} bytes, have {have}", len(buf))
    a = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    with np.errstate(invalid="ignore"):  # signalling NaNs widen to quiet NaNs
        return a.reshape(height, width)[::-1].astype(np.float64), pos


def write_pfm(raster) -> bytes:
    """Encode a :class:`RangeMap`, :class:`ConfidenceMap` or 2-D array as little-endian ``Pf``."""
    if isinstance(raster, RangeMap):
        a = raster.with_nan()
    elif isinstance(raster, ConfidenceMap):
        a = raster.data
    else:
        a = np.asarray(raster, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"refusing to write empty or non-2-D raster of shape {a.shape}")
    h, w = a.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(a[::-1], dtype="<f4").tobytes()


def read_range(buf: bytes) -> RangeMap:
    """Range map from a PFM; NaN and infinite samples become invalid pixels."""
    a, pos = _decode_pfm(buf)
    neg = np.argwhere(a < 0.0)
    if len(neg):
        r, c = neg[0]
        raise FormatError(f"negative range {a[r, c]!r} at row {r}, column {c}",
                          _sample_offset(pos, a.shape, r, c))
    return RangeMap(a)


def read_confidence(buf: bytes) -> ConfidenceMap:
    a, pos = _decode_pfm(buf)
    bad = np.argwhere(~np.isfinite(a))
    if len(bad):
        r, c = bad[0]
        raise FormatError(f"non-finite confidence at row {r}, column {c}", _sample_offset(pos, a.shape, r, c))
    return ConfidenceMap(np.clip(a, 0.0, 1.0))


# file-path conveniences used by the CLI

def load(path, kind: str):
    with open(path, "rb") as fh:
        buf = fh.read()
    return {
        "rgb": read_ppm,
        "range": read_range,
        "confidence": read_confidence,
        "mask": read_mask,
    }[kind](buf)


def save(path, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(payload)


__all__ = [
    "ConfidenceMap",
    "DepthMask",
    "FormatError",
    "RangeMap",
    "RgbImage",
    "read_confidence",
    "read_mask",
    "read_pfm",
    "read_pgm",
    "read_ppm",
    "read_range",
    "write_mask",
    "write_pfm",
    "write_pgm",
    "write_ppm",
]
