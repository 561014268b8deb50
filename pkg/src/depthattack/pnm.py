"""Binary PPM (P6) / PGM (P5) read and write, 8-bit only."""
from __future__ import annotations

import numpy as np

from .errors import DataError


def _header(magic: str, w: int, h: int, comment: str | None) -> bytes:
    lines = [magic]
    if comment:
        lines += [f"# {line}" for line in comment.splitlines()]
    lines += [f"{w} {h}", "255"]
    return ("\n".join(lines) + "\n").encode("ascii")


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map floats in [0,1] to uint8 with rounding."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image_chw: np.ndarray, comment: str | None = None) -> None:
    """Write a [3,H,W] float image in [0,1]."""
    img = np.asarray(image_chw)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"write_ppm expects [3,H,W], got {img.shape}")
    _, h, w = img.shape
    payload = to_bytes(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(_header("P6", w, h, comment))
        fh.write(payload)


def write_pgm(path, values: np.ndarray, comment: str | None = None) -> None:
    """Write a [H,W] uint8-compatible map (labels or pre-scaled intensities)."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise DataError(f"write_pgm expects [H,W], got {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise DataError("write_pgm values must fit in a byte")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_header("P5", w, h, comment))
        fh.write(arr.tobytes())


def _read_pnm(path, magic: bytes):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic!r}, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit files supported")
    return blob[pos + 1:], w, h


def read_ppm(path) -> np.ndarray:
    """Return a float32 [3,H,W] image in [0,1]."""
    payload, w, h = _read_pnm(path, b"P6")
    arr = np.frombuffer(payload, dtype=np.uint8, count=3 * w * h).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def read_pgm(path) -> np.ndarray:
    payload, w, h = _read_pnm(path, b"P5")
    return np.frombuffer(payload, dtype=np.uint8, count=w * h).reshape(h, w).copy()
