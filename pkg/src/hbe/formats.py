"""PGM and PFM image I/O plus the log tone-mapped PNG preview.

PGM: binary P5, 8-bit for maxval <= 255, otherwise 16-bit big-endian (the
format's byte order). PFM: grayscale 'Pf', float32 scanlines stored bottom to
top, the sign of the scale field encoding endianness (negative = little).
Writes quantize as documented: PGM rounds to the nearest integer sample, PFM
casts to float32.
"""

from __future__ import annotations

import numpy as np


class ImageFormatError(ValueError):
    """Malformed image file; byte_offset points at the failing position."""

    def __init__(self, message, byte_offset):
        self.byte_offset = int(byte_offset)
        super().__init__(f"{message} (at byte {self.byte_offset})")


class _Tokenizer:
    """Whitespace/comment-aware header scanner over raw bytes."""

    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def _skip_space_and_comments(self):
        while self.pos < len(self.blob):
            ch = self.blob[self.pos:self.pos + 1]
            if ch.isspace():
                self.pos += 1
            elif ch == b"#":
                nl = self.blob.find(b"\n", self.pos)
                self.pos = len(self.blob) if nl < 0 else nl + 1
            else:
                return

    def token(self, what):
        self._skip_space_and_comments()
        start = self.pos
        while self.pos < len(self.blob) and not self.blob[self.pos:self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            raise ImageFormatError(f"missing {what}", start)
        return self.blob[start:self.pos]

    def integer(self, what):
        tok = self.token(what)
        try:
            return int(tok)
        except ValueError:
            raise ImageFormatError(f"invalid {what} {tok!r}", self.pos - len(tok)) from None

    def floating(self, what):
        tok = self.token(what)
        try:
            return float(tok)
        except ValueError:
            raise ImageFormatError(f"invalid {what} {tok!r}", self.pos - len(tok)) from None

    def raster(self, count, dtype):
        # exactly one whitespace byte separates header and raster
        if self.pos >= len(self.blob):
            raise ImageFormatError("missing raster separator", self.pos)
        self.pos += 1
        nbytes = count * np.dtype(dtype).itemsize
        if len(self.blob) - self.pos < nbytes:
            raise ImageFormatError(
                f"truncated raster: need {nbytes} bytes, have {len(self.blob) - self.pos}",
                self.pos,
            )
        data = np.frombuffer(self.blob, dtype=dtype, count=count, offset=self.pos)
        self.pos += nbytes
        return data


def read_pgm(path):
    """Read a binary PGM into a float array (values as stored)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tok = _Tokenizer(blob)
    magic = tok.token("magic number")
    if magic != b"P5":
        raise ImageFormatError(f"not a binary PGM (magic {magic!r})", 0)
    width = tok.integer("width")
    height = tok.integer("height")
    maxval = tok.integer("maxval")
    if width <= 0 or height <= 0:
        raise ImageFormatError("non-positive dimensions", tok.pos)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"maxval {maxval} out of range", tok.pos)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = tok.raster(width * height, dtype)
    return data.reshape(height, width).astype(np.float64)


def write_pgm(path, image, maxval=65535):
    """Write a binary PGM, rounding samples to the nearest integer in
    [0, maxval] (16-bit big-endian for maxval > 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM writer expects a 2-d grayscale image")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must lie in [1, 65535]")
    q = np.clip(np.rint(image), 0, maxval)
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def read_pfm(path):
    """Read a grayscale PFM into a float array (top row first)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tok = _Tokenizer(blob)
    magic = tok.token("magic number")
    if magic == b"PF":
        raise ImageFormatError("color PFM is not supported, expected grayscale 'Pf'", 0)
    if magic != b"Pf":
        raise ImageFormatError(f"not a PFM (magic {magic!r})", 0)
    width = tok.integer("width")
    height = tok.integer("height")
    scale = tok.floating("scale")
    if width <= 0 or height <= 0:
        raise ImageFormatError("non-positive dimensions", tok.pos)
    if scale == 0:
        raise ImageFormatError("zero scale field", tok.pos)
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    data = tok.raster(width * height, dtype)
    image = data.reshape(height, width).astype(np.float64)
    return image[::-1]  # PFM scanlines run bottom to top


def write_pfm(path, image):
    """Write a grayscale little-endian PFM (scale -1.0), float32."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PFM writer expects a 2-d grayscale image")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(image[::-1].astype("<f4").tobytes())


def read_image(path):
    """Dispatch on extension: .pgm or .pfm."""
    name = str(path).lower()
    if name.endswith(".pgm"):
        return read_pgm(path)
    if name.endswith(".pfm"):
        return read_pfm(path)
    raise ValueError(f"unsupported image extension in {path!r} (use .pgm or .pfm)")


def write_image(path, image, maxval=65535):
    name = str(path).lower()
    if name.endswith(".pgm"):
        write_pgm(path, image, maxval=maxval)
    elif name.endswith(".pfm"):
        write_pfm(path, image)
    else:
        raise ValueError(f"unsupported image extension in {path!r} (use .pgm or .pfm)")


def log_tone_map(image):
    """Map linear radiance to 8 bits: 255 * log(1 + C/med) / log(1 + max/med)."""
    image = np.maximum(np.asarray(image, dtype=np.float64), 0.0)
    med = float(np.median(image))
    peak = float(image.max())
    if med <= 0:
        med = max(peak * 1e-4, 1e-12)
    if peak <= 0:
        return np.zeros(image.shape, dtype=np.uint8)
    mapped = 255.0 * np.log1p(image / med) / np.log1p(peak / med)
    return np.clip(np.rint(mapped), 0, 255).astype(np.uint8)


def write_png_preview(path, hdr_image):
    """8-bit PNG preview of a linear HDR image (display plumbing only)."""
    from PIL import Image

    Image.fromarray(log_tone_map(hdr_image), mode="L").save(path, format="PNG")
