"""Slice rendering to portable pixmap / graymap images.

Label slices use the standard display colors: red for necrotic core (1),
yellow for edema (2), green for enhancing tumor (4), black background.
Probability slices are graymaps where lighter means lower probability.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, ShapeError
from .metrics import LabelVolume

LABEL_COLORS = {
    0: (0, 0, 0),
    1: (255, 0, 0),
    2: (255, 255, 0),
    4: (0, 255, 0),
}

_AXIS_NAMES = ("depth", "height", "width")


def slice_plane(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Extract one 2-D plane from a rank-3 volume."""
    if volume.ndim != 3:
        raise ShapeError(f"expected a rank-3 volume, got rank {volume.ndim}")
    if axis not in (0, 1, 2):
        raise InputError(f"axis must be 0, 1, or 2, got {axis}")
    extent = volume.shape[axis]
    if not 0 <= index < extent:
        raise InputError(
            f"slice index {index} outside {_AXIS_NAMES[axis]} extent {extent}"
        )
    return np.take(volume, index, axis=axis)


def render_labels(labels: LabelVolume, axis: int, index: int) -> np.ndarray:
    """Color image (H, W, 3) uint8 for one slice of a label volume."""
    plane = slice_plane(labels.voxels, axis, index)
    # 5-entry lookup table; label 3 never occurs in legal volumes.
    lut = np.zeros((5, 3), dtype=np.uint8)
    for label, color in LABEL_COLORS.items():
        lut[label] = color
    return lut[plane]


def render_probability(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    """Gray image (H, W) uint8 for one slice of a probability volume.

    Probability 1 maps to black, probability 0 to white, so high-confidence
    regions read as dark against a light background.
    """
    vol = np.asarray(volume, dtype=np.float64)
    plane = slice_plane(vol, axis, index)
    if not np.all(np.isfinite(plane)):
        raise InputError("probability volume contains non-finite values")
    if plane.min() < 0.0 or plane.max() > 1.0:
        raise InputError("probability values must lie in [0, 1]")
    return np.round(255.0 * (1.0 - plane)).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Binary PPM (P6) writer for an (H, W, 3) uint8 image."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM image must have shape (H, W, 3), got {img.shape}")
    height, width = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5) writer for an (H, W) uint8 image."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ShapeError(f"PGM image must have shape (H, W), got {img.shape}")
    height, width = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_netpbm(path):
    """Read back a P5 or P6 image written by this module.

    Returns (H, W) uint8 for P5 and (H, W, 3) uint8 for P6.  Only the plain
    single-whitespace header layout produced by the writers is accepted.
    """
    from .errors import ParseError

    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] not in (b"P5", b"P6"):
        raise ParseError(f"{path}: not a P5/P6 netpbm file")
    magic, dims, maxval, body = parts
    try:
        width, height = (int(tok) for tok in dims.split())
    except ValueError as e:
        raise ParseError(f"{path}: malformed netpbm dimensions") from e
    if maxval != b"255":
        raise ParseError(f"{path}: unsupported maxval {maxval!r}")
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    if len(body) != expected:
        raise ParseError(
            f"{path}: expected {expected} pixel bytes, found {len(body)}"
        )
    data = np.frombuffer(body, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape)
