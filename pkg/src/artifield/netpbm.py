"""Binary PPM (P6) / PGM (P5) image IO, 8-bit, bit-exact round trips."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as binary 8-bit P6."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (H, W) uint8 array (e.g. class ids) as binary P5."""
    data = np.asarray(image)
    if data.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {data.shape}")
    data = data.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_header(f, magic: bytes) -> tuple[int, int, int]:
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":  # comment line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok:
            raise ValueError("truncated header")
        fields.append(int(tok))
    return fields[0], fields[1], fields[2]


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into an (H, W, 3) float64 image in [0, 1]."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P6")
        if maxval != 255:
            raise ValueError("only 8-bit PPM supported")
        raw = f.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ValueError(f"truncated PPM payload in {Path(path).name}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read binary P5 into an (H, W) uint8 array."""
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P5")
        if maxval != 255:
            raise ValueError("only 8-bit PGM supported")
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise ValueError(f"truncated PGM payload in {Path(path).name}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
