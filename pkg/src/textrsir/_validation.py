"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .errors import ArgumentError, DimensionError


def check_rgb_image(img, name="image", copy=False):
    """Validate an H x W x 3 image with finite values in [0, 1].

    Integer arrays are rejected rather than silently rescaled; use
    :func:`textrsir.imagecore.from_uint8` for 8-bit data.
    """
    arr = np.asarray(img)
    if arr.dtype.kind not in "fc" and arr.dtype.kind not in "iub":
        raise DimensionError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.dtype == np.uint8:
        raise ArgumentError(f"{name} is uint8; convert with from_uint8 first")
    arr = np.array(arr, dtype=np.float64, copy=copy or arr.dtype != np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} must be at least 1x1, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ArgumentError(
            f"{name} values must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def check_image_batch(images, name="images"):
    """Return a list of validated images from an array or sequence."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    return [check_rgb_image(im, name=f"{name}[{i}]") for i, im in enumerate(images)]


def check_same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ArgumentError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ArgumentError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_captions(captions, n):
    """Normalize an optional caption sequence to a list of ``n`` strings."""
    if captions is None:
        return [""] * n
    if isinstance(captions, str):
        captions = [captions]
    captions = [str(c) for c in captions]
    if len(captions) != n:
        raise DimensionError(f"got {len(captions)} captions for {n} images")
    return captions
