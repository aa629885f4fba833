"""Binary netpbm readers and writers (P5 PGM, P6 PPM) plus small text formats.

Wire conventions:
  depth        16-bit P5, value = millimetres, 0 = missing reading
  labels       8-bit P5, class index per pixel, 255 = ignore
  normals      8-bit P6, channel = round((n_c + 1) / 2 * 255)
  normal sidecar  raw little-endian float64 (nx, ny, nz) triples, row-major,
                  (0, 0, 0) marking invalid pixels
  intrinsics   text file of ``key value`` lines for fx, fy, cx, cy

Multi-byte PGM samples are big-endian, following the netpbm convention.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError

_WHITESPACE = b" \t\r\n"


def _read_header(data: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Parse a P5/P6 header; returns (width, height, maxval, data offset)."""
    if data[:2] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()!r}", byte_offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1] in (b"#",) + tuple(
            bytes([c]) for c in _WHITESPACE
        ):
            if data[pos:pos + 1] == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    raise FormatError(f"{path}: unterminated comment", byte_offset=pos)
                pos = nl + 1
            else:
                pos += 1
        m = re.match(rb"\d+", data[pos:])
        if m is None:
            raise FormatError(f"{path}: expected integer header field", byte_offset=pos)
        fields.append(int(m.group(0)))
        pos += m.end()
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError(f"{path}: missing whitespace after maxval", byte_offset=pos)
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid dimensions or maxval {fields}", byte_offset=2)
    return width, height, maxval, pos


def _read_raster(path, magic: bytes, channels: int) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    width, height, maxval, pos = _read_header(data, magic, path)
    two_byte = maxval > 255
    need = width * height * channels * (2 if two_byte else 1)
    if len(data) - pos < need:
        raise FormatError(
            f"{path}: raster truncated, need {need} bytes", byte_offset=len(data)
        )
    dtype = ">u2" if two_byte else np.uint8
    raster = np.frombuffer(data, dtype=dtype, count=width * height * channels, offset=pos)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return raster.reshape(shape).astype(np.uint16 if two_byte else np.uint8), maxval


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (H,W array, maxval)."""
    return _read_raster(path, b"P5", 1)


def read_ppm(path) -> tuple[np.ndarray, int]:
    """Read a binary PPM; returns (H,W,3 array, maxval)."""
    return _read_raster(path, b"P6", 3)


def write_pgm(path, values: np.ndarray, maxval: int) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"PGM writer needs H,W values, got shape {values.shape}")
    if values.min() < 0 or values.max() > maxval:
        raise FormatError(f"PGM values outside [0, {maxval}]")
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n{maxval}\n".encode()
    body = values.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    Path(path).write_bytes(header + body)


def write_ppm(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 3 or values.shape[2] != 3:
        raise FormatError(f"PPM writer needs H,W,3 values, got shape {values.shape}")
    if values.min() < 0 or values.max() > 255:
        raise FormatError("PPM values outside [0, 255]")
    header = f"P6\n{values.shape[1]} {values.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + values.astype(np.uint8).tobytes())


def write_depth_pgm(path, depth_m: np.ndarray, valid: np.ndarray) -> None:
    """Metres in memory, millimetres on disk; invalid pixels become 0."""
    mm = np.round(np.where(valid, depth_m * 1000.0, 0.0)).astype(np.int64)
    if mm.max() > 65535:
        raise FormatError("depth exceeds 65.535 m, not representable in 16-bit mm")
    write_pgm(path, mm.astype(np.uint16), 65535)


def read_depth_pgm(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (depth in metres, validity mask)."""
    raw, maxval = read_pgm(path)
    if maxval != 65535:
        raise FormatError(f"{path}: depth PGM must have maxval 65535, got {maxval}")
    valid = raw > 0
    return raw.astype(np.float64) / 1000.0, valid


def write_normal_ppm(path, normals: np.ndarray, valid: np.ndarray) -> None:
    """Quantize unit normals to 8-bit; invalid pixels are written black."""
    chan = np.round((normals + 1.0) / 2.0 * 255.0)
    chan = np.clip(chan, 0, 255)
    chan[~valid] = 0
    write_ppm(path, chan.astype(np.uint8))


def read_normal_ppm(path) -> np.ndarray:
    raw, _ = read_ppm(path)
    return raw.astype(np.float64) / 255.0 * 2.0 - 1.0


def write_normal_sidecar(path, normals: np.ndarray, valid: np.ndarray) -> None:
    n = np.where(valid[..., None], normals, 0.0).astype("<f8")
    Path(path).write_bytes(n.tobytes())


def read_normal_sidecar(path, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    need = height * width * 3 * 8
    if len(data) != need:
        raise FormatError(f"{path}: sidecar holds {len(data)} bytes, expected {need}")
    n = np.frombuffer(data, dtype="<f8").reshape(height, width, 3).copy()
    valid = np.linalg.norm(n, axis=2) > 0.5
    return n, valid


INTRINSICS_KEYS = ("fx", "fy", "cx", "cy")


def read_intrinsics_text(path) -> dict[str, float]:
    values: dict[str, float] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise FormatError(f"{path}: malformed intrinsics line {line!r}")
        key, val = parts
        try:
            values[key] = float(val)
        except ValueError:
            raise FormatError(f"{path}: non-numeric value for key {key!r}") from None
    for key in INTRINSICS_KEYS:
        if key not in values:
            raise FormatError(f"{path}: missing intrinsics key {key!r}")
    return values


def write_intrinsics_text(path, fx: float, fy: float, cx: float, cy: float) -> None:
    Path(path).write_text(f"fx {fx!r}\nfy {fy!r}\ncx {cx!r}\ncy {cy!r}\n")
