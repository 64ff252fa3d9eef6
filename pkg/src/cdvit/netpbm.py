"""Binary PPM (P6) and PGM (P5) image files, 8 bits per channel."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IntegrityError


def _write(path: str | Path, magic: bytes, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + img.tobytes())


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise IntegrityError(f"PPM image must be (H, W, 3), got {img.shape}")
    _write(path, b"P6", img)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    if img.ndim != 2:
        raise IntegrityError(f"PGM image must be (H, W), got {img.shape}")
    _write(path, b"P5", img)


def _read_header(data: bytes, path) -> tuple[bytes, int, int, int]:
    # magic, then 3 whitespace-separated integers; '#' comments allowed
    tokens: list[bytes] = []
    i = 2
    magic = data[:2]
    while len(tokens) < 3 and i < len(data):
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < 3:
        raise IntegrityError(f"{path}: truncated netpbm header")
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise IntegrityError(f"{path}: only 8-bit netpbm supported, maxval={maxval}")
    return magic, w, h, i + 1  # header ends with a single whitespace byte


def _read(path: str | Path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    got, w, h, start = _read_header(data, path)
    if got != magic:
        raise IntegrityError(f"{path}: expected {magic.decode()} file, got {got!r}")
    count = w * h * channels
    pixels = np.frombuffer(data, dtype=np.uint8, count=count, offset=start)
    if pixels.size != count:
        raise IntegrityError(f"{path}: truncated pixel data")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return pixels.reshape(shape).copy()


def read_ppm(path: str | Path) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read(path, b"P5", 1)
