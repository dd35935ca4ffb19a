"""Image export for fields, gradient maps, and boundary masks.

Writes PNG through Pillow when it is importable, and falls back to the
plain netpbm formats (PGM for grayscale, PPM for color) otherwise, so
runs on minimal installs still produce viewable files. The returned path
carries the extension actually used.
"""

import os

import numpy as np

from ..errors import ConfigError

try:
    from PIL import Image

    _HAVE_PIL = True
except ImportError:  # pragma: no cover - exercised only on minimal installs
    _HAVE_PIL = False

__all__ = ["to_uint8", "save_image", "save_field_image", "save_boundary_image"]


def to_uint8(array, vmin=None, vmax=None):
    """Scale an array linearly into 0..255 uint8.

    vmin/vmax default to the observed range; a constant input maps to 0.
    """
    array = np.asarray(array, dtype=np.float64)
    lo = float(np.min(array)) if vmin is None else float(vmin)
    hi = float(np.max(array)) if vmax is None else float(vmax)
    if hi - lo <= 0:
        return np.zeros(array.shape, dtype=np.uint8)
    scaled = (np.clip(array, lo, hi) - lo) / (hi - lo)
    return np.round(scaled * 255.0).astype(np.uint8)


def _write_netpbm(path, data):
    if data.ndim == 2:
        header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n"
    else:
        header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def save_image(path, data):
    """Write a uint8 (H, W) or (H, W, 3) image; returns the path written.

    ``path`` should end in .png; on installs without Pillow the
    extension is swapped for .pgm / .ppm.
    """
    data = np.ascontiguousarray(data)
    if data.dtype != np.uint8:
        raise ConfigError(f"save_image expects uint8 data, got {data.dtype}")
    if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
        raise ConfigError(
            f"save_image expects (H, W) or (H, W, 3), got {data.shape}"
        )
    if _HAVE_PIL:
        Image.fromarray(data).save(path, format="PNG")
        return path
    stem, _ = os.path.splitext(path)
    fallback = stem + (".pgm" if data.ndim == 2 else ".ppm")
    _write_netpbm(fallback, data)
    return fallback


def save_field_image(path, field):
    """Write a channel field in [-1, 1] as an RGB image.

    A 3-channel field maps channels to RGB directly; a single channel is
    replicated to gray.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 2:
        field = field[:, :, None]
    if field.shape[2] == 1:
        field = np.repeat(field, 3, axis=2)
    if field.shape[2] != 3:
        raise ConfigError(
            f"field image needs 1 or 3 channels, got {field.shape[2]}"
        )
    return save_image(path, to_uint8(field, vmin=-1.0, vmax=1.0))


def save_boundary_image(path, boundary_map):
    """Write a binary boundary map, boundary pixels white."""
    mask = np.asarray(boundary_map) != 0
    return save_image(path, np.where(mask, 255, 0).astype(np.uint8))
