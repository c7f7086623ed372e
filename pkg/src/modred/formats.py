"""On-disk formats.

MRD1 binary matrices: magic ``b"MRD1"``, rows and cols as little-endian
uint64, then ``rows * cols`` little-endian float64 values in row-major
order. Metadata travels in a sidecar text header ``<path>.hdr`` of
``key=value`` lines.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MRD1"
_DIMS = struct.Struct("<QQ")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def mrd1_bytes(A) -> bytes:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError("MRD1 stores 1-D or 2-D arrays only")
    if not np.all(np.isfinite(A)):
        raise ValueError("MRD1 payload must be finite")
    rows, cols = A.shape
    return MAGIC + _DIMS.pack(rows, cols) + np.ascontiguousarray(A, dtype="<f8").tobytes()


def parse_mrd1(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise ValueError("not an MRD1 payload (bad magic)")
    rows, cols = _DIMS.unpack_from(data, 4)
    body = data[4 + _DIMS.size:]
    if len(body) != 8 * rows * cols:
        raise ValueError(f"MRD1 payload length {len(body)} does not match {rows}x{cols}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_mrd1(path, A) -> None:
    atomic_write_bytes(path, mrd1_bytes(A))


def read_mrd1(path) -> np.ndarray:
    return parse_mrd1(Path(path).read_bytes())


def write_text_matrix(path, A) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    lines = [",".join(repr(float(v)) for v in row) for row in A]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_text_matrix(path) -> np.ndarray:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    return np.array([[float(v) for v in line.split(",")] for line in rows])


def header_path(path) -> Path:
    return Path(str(path) + ".hdr")


def format_header(meta: dict) -> str:
    lines = []
    for key, value in meta.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise ValueError(f"header entry {key!r} cannot be encoded")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> dict:
    meta = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed header line {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def write_header(path, meta: dict) -> None:
    """Write the sidecar header of the data file at ``path``."""
    atomic_write_bytes(header_path(path), format_header(meta).encode())


def read_header(path) -> dict:
    return parse_header(header_path(path).read_text())


def write_pgm(path, image, vmin: float | None = None, vmax: float | None = None):
    """Write a 2-D array as binary 8-bit PGM with linear min-max scaling.

    Returns the ``(vmin, vmax)`` actually used so callers can record it.
    Row 0 of ``image`` becomes the top row of the picture.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    lo = float(img.min()) if vmin is None else float(vmin)
    hi = float(img.max()) if vmax is None else float(vmax)
    span = hi - lo if hi > lo else 1.0
    pix = np.clip(np.rint((img - lo) / span * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace byte separates header from raster
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError("only 8-bit P5 PGM is supported")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
