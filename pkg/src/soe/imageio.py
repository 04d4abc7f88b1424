"""Binary PPM (P6) and PGM (P5) read/write, 8-bit.

Images are float arrays in ``[0, 1]``: RGB as ``3 x H x W``, gray as ``H x W``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import StorageError


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(a, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def _write(path, magic: bytes, w: int, h: int, payload: bytes) -> None:
    try:
        Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + payload)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    _, h, w = image.shape
    _write(path, b"P6", w, h, _quantize(image).transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    h, w = gray.shape
    _write(path, b"P5", w, h, _quantize(gray).tobytes())


def _read(path, magic: bytes) -> tuple[int, int, bytes]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise StorageError(f"{path}: truncated header")
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise StorageError(f"{path}: expected {magic.decode()} file, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise StorageError(f"{path}: only 8-bit files are supported")
    return w, h, data[pos + 1:]


def read_ppm(path) -> np.ndarray:
    w, h, raw = _read(path, b"P6")
    if len(raw) < 3 * w * h:
        raise StorageError(f"{path}: truncated pixel data")
    px = np.frombuffer(raw[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    w, h, raw = _read(path, b"P5")
    if len(raw) < w * h:
        raise StorageError(f"{path}: truncated pixel data")
    return np.frombuffer(raw[: w * h], dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
