"""Reading and writing PGM (portable greymap) images, formats P2 and P5, maxval 255."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["GreyImage", "read_pgm", "write_pgm"]

_WHITESPACE = b" \t\n\r\x0b\x0c"


@dataclass(frozen=True)
class GreyImage:
    """A grey-scale image, one byte per pixel."""

    pixels: np.ndarray  # shape (height, width), dtype uint8

    def __post_init__(self) -> None:
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("image must be a non-empty 2D pixel array")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


def _tokens(data: bytes):
    """Yield header tokens, skipping whitespace and # comments; also yield the offset."""
    i = 0
    n = len(data)
    while i < n:
        c = data[i : i + 1]
        if c in (b"#",):
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c in _WHITESPACE:
            i += 1
        else:
            j = i
            while j < n and data[j : j + 1] not in _WHITESPACE and data[j : j + 1] != b"#":
                j += 1
            yield data[i:j], j
            i = j


def read_pgm(path) -> GreyImage:
    """Read a P2 (ASCII) or P5 (binary) greymap with maxval 255."""
    data = Path(path).read_bytes()
    toks = _tokens(data)
    try:
        magic, _ = next(toks)
    except StopIteration:
        raise ValueError(f"{path}: empty file") from None
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: unsupported magic {magic!r}, expected P2 or P5")
    try:
        (w_tok, _), (h_tok, _), (max_tok, max_end) = next(toks), next(toks), next(toks)
    except StopIteration:
        raise ValueError(f"{path}: truncated header") from None
    width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise ValueError(f"{path}: bad dimensions {width}x{height}")
    count = width * height
    if magic == b"P5":
        start = max_end + 1  # exactly one whitespace byte after maxval
        raw = data[start : start + count]
        if len(raw) < count:
            raise ValueError(f"{path}: expected {count} pixel bytes, got {len(raw)}")
        px = np.frombuffer(raw, dtype=np.uint8, count=count)
    else:
        vals = []
        for tok, _ in toks:
            vals.append(int(tok))
            if len(vals) == count:
                break
        if len(vals) < count:
            raise ValueError(f"{path}: expected {count} pixel values, got {len(vals)}")
        if any(v < 0 or v > 255 for v in vals):
            raise ValueError(f"{path}: pixel value out of range")
        px = np.asarray(vals, dtype=np.uint8)
    return GreyImage(pixels=px.reshape(height, width))


def write_pgm(image: GreyImage, path, binary: bool = True) -> None:
    """Write a greymap; canonical header so identical images round-trip bit-exactly."""
    h, w = image.shape
    out = Path(path)
    if binary:
        out.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + image.pixels.tobytes())
    else:
        lines = [f"P2\n{w} {h}\n255"]
        for row in image.pixels:
            lines.append(" ".join(str(int(v)) for v in row))
        out.write_text("\n".join(lines) + "\n", encoding="ascii")
