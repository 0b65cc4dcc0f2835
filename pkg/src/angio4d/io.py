"""On-disk binary formats.

Float image file (.a4f): 16-byte header (8-byte magic, uint32 version,
4 reserved bytes), then width and height as little-endian uint32, then
row-major float32 pixels (shape height x width).  The float file is the
ground truth for training targets; PNG export is an 8-bit linear
quantization for viewing only.

Checkpoint file (.a4c): 8-byte magic, uint32 version, uint32 JSON header
length, the JSON header (model dims, iteration, RNG state, array
manifest), then the named arrays concatenated as little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

__all__ = [
    "write_image",
    "read_image",
    "write_png",
    "write_checkpoint",
    "read_checkpoint",
    "FormatError",
]

IMAGE_MAGIC = b"A4DIMG\x00\x00"
IMAGE_VERSION = 1
CHECKPOINT_MAGIC = b"A4DCKPT\x00"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Raised for unrecognized or corrupt angio4d binary files."""


def _atomic_write(path, payload: bytes):
    # temp-then-rename so a failed write never leaves a partial file
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".a4d-tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_image(path, image: np.ndarray):
    """Write a 2D float image (height, width) in the .a4f format."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim != 2:
        raise ValueError("image must be 2D")
    h, w = image.shape
    header = IMAGE_MAGIC + struct.pack("<I4x", IMAGE_VERSION) + struct.pack("<II", w, h)
    _atomic_write(path, header + image.tobytes(order="C"))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != IMAGE_MAGIC:
        raise FormatError(f"{path}: not an angio4d image file")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != IMAGE_VERSION:
        raise FormatError(f"{path}: unsupported image format version {version}")
    w, h = struct.unpack_from("<II", blob, 16)
    expected = 24 + w * h * 4
    if len(blob) != expected:
        raise FormatError(f"{path}: payload length {len(blob)} != {expected}")
    return np.frombuffer(blob, dtype="<f4", offset=24).reshape(h, w).copy()


def write_png(path, image: np.ndarray):
    """8-bit linear quantization of a [0, 1] float image."""
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def write_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]):
    """Serialize metadata plus named float32 arrays.

    ``meta`` must be JSON-serializable; array shapes are recorded in the
    header so loading restores exact shapes.
    """
    manifest = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True).encode()
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header))
        + header
        + b"".join(blobs)
    )
    _atomic_write(path, payload)


def read_checkpoint(path):
    """Returns (meta, arrays)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an angio4d checkpoint file")
    version, header_len = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + header_len])
    arrays = {}
    offset = 16 + header_len
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        )
        offset += count * 4
    if offset != len(blob):
        raise FormatError(f"{path}: trailing or missing array bytes")
    return header["meta"], arrays
