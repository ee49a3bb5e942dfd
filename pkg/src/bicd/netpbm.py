"""Raw NetPBM image I/O (P6 color, P5 grayscale), 8-bit, dependency free."""

from __future__ import annotations

import numpy as np


def _read_header_tokens(data: bytes, path: str):
    """Parse magic + width/height/maxval, skipping '#' comments.

    Returns (magic, width, height, maxval, payload_offset).
    """
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated NetPBM header")
        ch = data[pos : pos + 1]
        if ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise ValueError(f"{path}: unterminated comment in header")
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    magic = tokens[0].decode("ascii", errors="replace")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise ValueError(f"{path}: malformed NetPBM header fields {tokens[1:4]}")
    if width < 0 or height < 0:
        raise ValueError(f"{path}: negative image dimensions")
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, found {maxval}")
    return magic, width, height, maxval, pos


def read_ppm(path) -> np.ndarray:
    """Read a raw P6 file into an (H, W, 3) uint8 array."""
    data = open(path, "rb").read()
    magic, w, h, _, off = _read_header_tokens(data, str(path))
    if magic != "P6":
        raise ValueError(f"{path}: expected P6 magic, found {magic!r}")
    need = w * h * 3
    raster = data[off : off + need]
    if len(raster) != need:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    """Read a raw P5 file into an (H, W) uint8 array."""
    data = open(path, "rb").read()
    magic, w, h, _, off = _read_header_tokens(data, str(path))
    if magic != "P5":
        raise ValueError(f"{path}: expected P5 magic, found {magic!r}")
    need = w * h
    raster = data[off : off + need]
    if len(raster) != need:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"write_ppm expects (H,W,3) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"write_pgm expects (H,W) uint8, got {img.shape} {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())
