"""
Image I/O
Binary PPM (P6) read/write, with PNG through matplotlib when it is installed
"""

import io
import re
from pathlib import Path
from typing import Union

import numpy as np

from atomic_io import write_atomic
from errors import DatasetError

PathLike = Union[str, Path]

_PPM_HEADER = re.compile(rb"^P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path: PathLike, image: np.ndarray):
    """Write an H x W x 3 float image in [0, 1] as 8-bit P6 (atomic)"""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"PPM needs an H x W x 3 image, got {image.shape}")
    h, w, _ = image.shape
    data = b"P6\n%d %d\n255\n" % (w, h) + to_uint8(image).tobytes()
    write_atomic(path, data)


def read_ppm(path: PathLike) -> np.ndarray:
    """H x W x 3 float image in [0, 1]"""
    raw = Path(path).read_bytes()
    match = _PPM_HEADER.match(raw)
    if match is None:
        raise DatasetError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    body = raw[match.end():]
    if len(body) < w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data ({len(body)} of {w * h * 3} bytes)")
    pixels = np.frombuffer(body[: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pixels.astype(np.float64) / 255.0


def write_image(path: PathLike, image: np.ndarray):
    """Dispatch on the extension (.ppm always, .png when matplotlib is available)"""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from matplotlib import image as mpimg
        except ImportError as exc:
            raise DatasetError("PNG output needs matplotlib; use a .ppm path") from exc
        buffer = io.BytesIO()
        mpimg.imsave(buffer, to_uint8(image), format="png")
        write_atomic(path, buffer.getvalue())
        return
    write_ppm(path, image)


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"Image not found: {path}")
    if path.suffix.lower() == ".png":
        try:
            from matplotlib import image as mpimg
        except ImportError as exc:
            raise DatasetError("PNG input needs matplotlib") from exc
        pixels = mpimg.imread(path)
        if pixels.dtype == np.uint8:
            pixels = pixels.astype(np.float64) / 255.0
        return np.asarray(pixels[..., :3], dtype=np.float64)
    return read_ppm(path)
