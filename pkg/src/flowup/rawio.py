"""Raw little-endian float32 image format shared across the package.

Layout: 16-byte header (magic ``RFC1``, u32 width, u32 height, u32 channels,
all little-endian) followed by ``height * width * channels`` float32 values in
row-major order with the channel axis fastest. Arrays are exchanged as numpy
``(height, width, channels)`` float32; 2-D arrays are written as channels=1.
"""

import io
import struct

import numpy as np

MAGIC = b"RFC1"
HEADER = struct.Struct("<4sIII")


class RawFormatError(ValueError):
    """Raised when a blob does not parse as the raw image format."""


def encode_image(arr: np.ndarray) -> bytes:
    """Serialize a (H, W) or (H, W, C) float array to raw bytes."""
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise RawFormatError(f"expected 2-D or 3-D array, got shape {arr.shape}")
    h, w, c = a.shape
    buf = io.BytesIO()
    buf.write(HEADER.pack(MAGIC, w, h, c))
    buf.write(np.ascontiguousarray(a).astype("<f4").tobytes())
    return buf.getvalue()


def decode_image(blob: bytes) -> np.ndarray:
    """Parse raw bytes back into a (H, W, C) float32 array."""
    if len(blob) < HEADER.size:
        raise RawFormatError("blob shorter than header")
    magic, w, h, c = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise RawFormatError(f"bad magic {magic!r}")
    n = h * w * c
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER.size)
    if data.size != n:
        raise RawFormatError(f"expected {n} values, found {data.size}")
    return data.reshape(h, w, c).astype(np.float32)


def write_image(path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_image(arr))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_image(f.read())
