"""
Raster helpers: resampling plus binary PPM / PGM export and parsing, on Pillow.
"""
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image

from errors import FormatError

RESAMPLE_FILTERS = {
    "bilinear": Image.Resampling.BILINEAR,
    "nearest": Image.Resampling.NEAREST,
}

# Pillow modes that hold 16-bit PGM samples
_WIDE_MODES = ("I", "I;16", "I;16B")


# ==================== RESAMPLING ====================

def _resample(array: np.ndarray, out_h: int, out_w: int, resample) -> np.ndarray:
    array = np.asarray(array)
    lead = array.shape[:-2]
    as_float = resample != Image.Resampling.NEAREST or array.dtype.kind == "f"
    planes = array.reshape((-1,) + array.shape[-2:])
    if len(planes) == 0:
        return np.zeros(lead + (out_h, out_w), dtype=np.float64 if as_float else array.dtype)

    out = []
    for plane in planes:
        # "F" (float32) for continuous values, "I" (int32) for label planes
        source = np.ascontiguousarray(plane, dtype=np.float32 if as_float else np.int32)
        out.append(np.asarray(Image.fromarray(source).resize((out_w, out_h), resample)))
    result = np.stack(out).reshape(lead + (out_h, out_w))
    return result.astype(np.float64) if as_float else result.astype(array.dtype)


def resize_bilinear(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling over the two trailing axes."""
    if array.shape[-2:] == (out_h, out_w):
        return array.astype(np.float64, copy=True)
    return _resample(array, out_h, out_w, Image.Resampling.BILINEAR)


def resize_nearest(array: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resampling over the two trailing axes (dtype preserved)."""
    if array.shape[-2:] == (out_h, out_w):
        return array.copy()
    return _resample(array, out_h, out_w, Image.Resampling.NEAREST)


def resize(array: np.ndarray, out_h: int, out_w: int, mode: str = "bilinear") -> np.ndarray:
    if mode not in RESAMPLE_FILTERS:
        raise ValueError(f"unknown resampling mode '{mode}'")
    if mode == "bilinear":
        return resize_bilinear(array, out_h, out_w)
    return resize_nearest(array, out_h, out_w)


# ==================== NETPBM ====================

def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Binary PPM (P6) from a 3×H×W float image in [0, 1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"PPM export needs a 3×H×W image, got {image.shape}")
    path = Path(path)
    Image.fromarray(np.ascontiguousarray(to_u8(image).transpose(1, 2, 0))).save(path, format="PPM")
    return path


def write_pgm(path: Union[str, Path], plane: np.ndarray, depth: int = 8) -> Path:
    """Binary PGM (P5) of an H×W integer plane, 8-bit (maxval 255) or 16-bit (maxval 65535)."""
    if plane.ndim != 2:
        raise FormatError(f"PGM export needs an H×W plane, got {plane.shape}")
    if depth not in (8, 16):
        raise FormatError(f"PGM depth must be 8 or 16, got {depth}")
    maxval = 255 if depth == 8 else 65535
    values = np.asarray(plane)
    if values.min(initial=0) < 0 or values.max(initial=0) > maxval:
        raise FormatError(f"PGM values outside [0, {maxval}]")

    # Pillow writes mode "L" with maxval 255 and mode "I" as big-endian 16-bit
    dtype = np.uint8 if depth == 8 else np.int32
    path = Path(path)
    Image.fromarray(np.ascontiguousarray(values, dtype=dtype)).save(path, format="PPM")
    return path


def read_pnm(path: Union[str, Path]) -> Tuple[str, int, np.ndarray]:
    """
    Parse a binary P5/P6 file.

    Returns (magic, maxval, pixels) with pixels shaped H×W or H×W×3.
    """
    try:
        with Image.open(path) as image:
            if image.format != "PPM":
                raise FormatError(f"{path}: not a PPM/PGM file ({image.format})")
            image.load()
            mode = image.mode
            pixels = np.asarray(image).astype(np.int64)
    except OSError as e:
        raise FormatError(f"{path}: unreadable image: {e}")

    if mode == "RGB":
        return "P6", 255, pixels
    if mode == "L":
        return "P5", 255, pixels
    if mode in _WIDE_MODES:
        return "P5", 65535, pixels
    raise FormatError(f"{path}: unsupported image mode {mode!r}")
