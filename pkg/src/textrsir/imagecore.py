"""Image primitives: bicubic resampling, codecs, and fidelity metrics.

Images are ``(H, W, 3)`` float64 arrays with values in ``[0, 1]``. Pixel I/O
is 8-bit per channel and converts by ``value / 255``.
"""

import io
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from ._validation import check_positive_int, check_rgb_image, check_same_shape
from .errors import ArgumentError, DecodeError, DimensionError, FormatError

BICUBIC_A = -0.5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

_MAGIC = {
    "JPEG": (b"\xff\xd8",),
    "PNG": (b"\x89PNG\r\n\x1a\n",),
    "TIFF": (b"II*\x00", b"MM\x00*"),
}


@dataclass(frozen=True)
class ByteBlob:
    """An encoded image together with its container format."""

    data: bytes
    format: str

    def __post_init__(self):
        if self.format not in _MAGIC:
            raise FormatError(f"unknown format {self.format!r}")
        if not isinstance(self.data, (bytes, bytearray)):
            raise FormatError("blob data must be bytes")
        if self.data and not self.data.startswith(_MAGIC[self.format]):
            raise FormatError(f"data does not start with {self.format} magic bytes")

    @property
    def byte_count(self):
        return len(self.data)


@dataclass(frozen=True)
class MetricPair:
    psnr_db: float
    ssim: float


def from_uint8(arr):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[-1] == 4:
        arr = arr[..., :3]
    return arr.astype(np.float64) / 255.0


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- resampling


def cubic_kernel(x, a=BICUBIC_A):
    """Keys cubic convolution kernel; ``a=-0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def _resample_taps(n_in, n_out):
    # sample-center alignment; out-of-range taps replicate the border sample
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    offsets = np.arange(-1, 3)
    idx = base[:, None] + offsets
    weights = cubic_kernel(src[:, None] - idx)
    return np.clip(idx, 0, n_in - 1), weights, np.clip(base, 0, n_in - 1)


def _resample_matrix(n_in, n_out):
    idx, weights, _ = _resample_taps(n_in, n_out)
    mat = np.zeros((n_out, n_in))
    for t in range(idx.shape[1]):
        np.add.at(mat, (np.arange(n_out), idx[:, t]), weights[:, t])
    return mat


def _resample_axis(arr, n_out, axis):
    # anchored form x[a] + sum w (x[i] - x[a]) keeps constant regions bit-exact
    moved = np.moveaxis(arr, axis, 0)
    idx, weights, anchor = _resample_taps(moved.shape[0], n_out)
    ref = moved[anchor]
    out = ref.copy()
    shape = (n_out,) + (1,) * (moved.ndim - 1)
    for t in range(idx.shape[1]):
        out += weights[:, t].reshape(shape) * (moved[idx[:, t]] - ref)
    return np.moveaxis(out, 0, axis)


def resize_bicubic(img, height, width):
    """Resample to an arbitrary ``height x width`` and clamp to ``[0, 1]``."""
    img = check_rgb_image(img)
    check_positive_int(height, "height")
    check_positive_int(width, "width")
    out = _resample_axis(_resample_axis(img, height, 0), width, 1)
    return np.clip(out, 0.0, 1.0)


def downsample_bicubic(img, factor):
    """Shrink both axes by an integer ``factor`` (which must divide H and W)."""
    factor = check_positive_int(factor, "factor")
    img = check_rgb_image(img)
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise DimensionError(f"{h}x{w} image is not divisible by factor {factor}")
    if factor == 1:
        return img.copy()
    return resize_bicubic(img, h // factor, w // factor)


def upsample_bicubic(img, factor):
    """Enlarge both axes by an integer ``factor``."""
    factor = check_positive_int(factor, "factor")
    img = check_rgb_image(img)
    if factor == 1:
        return img.copy()
    return resize_bicubic(img, img.shape[0] * factor, img.shape[1] * factor)


# ---------------------------------------------------------------- codecs


def jpeg_encode(img, quality=75, subsampling=None):
    """Encode to baseline JPEG.

    Chroma is subsampled 4:2:0 below quality 90 and kept at 4:4:4 from 90 up,
    unless ``subsampling`` (a Pillow subsampling value) says otherwise.
    """
    if isinstance(quality, bool) or not isinstance(quality, (int, np.integer)):
        raise ArgumentError(f"quality must be an integer, got {quality!r}")
    if not 1 <= quality <= 100:
        raise ArgumentError(f"quality must be in [1, 100], got {quality}")
    img = check_rgb_image(img)
    if subsampling is None:
        subsampling = 0 if quality >= 90 else 2
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(
        buf, format="JPEG", quality=int(quality), subsampling=subsampling
    )
    return ByteBlob(buf.getvalue(), "JPEG")


def _decode_with_pillow(data, fmt):
    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.format != fmt:
                raise FormatError(f"stream decodes as {im.format}, expected {fmt}")
            im.load()
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError) as exc:
        raise DecodeError(f"corrupt {fmt} stream: {exc}", offset=len(data)) from exc
    return from_uint8(rgb)


def jpeg_decode(blob):
    """Decode a JPEG blob to a float image."""
    if not isinstance(blob, ByteBlob):
        raise FormatError("jpeg_decode expects a ByteBlob")
    if blob.format != "JPEG":
        raise FormatError(f"cannot JPEG-decode a {blob.format} blob")
    data = bytes(blob.data)
    if len(data) < 4 or not data.startswith(b"\xff\xd8"):
        raise DecodeError("missing SOI marker", offset=0)
    if not data.rstrip(b"\x00").endswith(b"\xff\xd9"):
        raise DecodeError("stream truncated before EOI marker", offset=len(data))
    return _decode_with_pillow(data, "JPEG")


def encode_lossless(img, fmt="TIFF"):
    """Encode as uncompressed TIFF or PNG."""
    img = check_rgb_image(img)
    buf = io.BytesIO()
    pil = Image.fromarray(to_uint8(img), mode="RGB")
    if fmt == "TIFF":
        pil.save(buf, format="TIFF", compression="raw")
    elif fmt == "PNG":
        pil.save(buf, format="PNG")
    else:
        raise FormatError(f"unsupported lossless format {fmt!r}")
    return ByteBlob(buf.getvalue(), fmt)


def decode_blob(blob):
    if blob.format == "JPEG":
        return jpeg_decode(blob)
    return _decode_with_pillow(bytes(blob.data), blob.format)


_SUFFIX_FORMAT = {".jpg": "JPEG", ".jpeg": "JPEG", ".png": "PNG", ".tif": "TIFF", ".tiff": "TIFF"}


def read_image(path):
    """Read an 8-bit PNG, TIFF, or JPEG file as a float RGB image."""
    with open(path, "rb") as fh:
        data = fh.read()
    for fmt, magics in _MAGIC.items():
        if data.startswith(magics):
            return decode_blob(ByteBlob(data, fmt))
    raise FormatError(f"{path}: unrecognized image format")


def write_image(path, img, quality=75):
    """Write by file suffix; TIFF is stored uncompressed."""
    suffix = str(path)[str(path).rfind("."):].lower()
    fmt = _SUFFIX_FORMAT.get(suffix)
    if fmt is None:
        raise FormatError(f"cannot infer image format from {path}")
    blob = jpeg_encode(img, quality) if fmt == "JPEG" else encode_lossless(img, fmt)
    with open(path, "wb") as fh:
        fh.write(blob.data)
    return blob


# ---------------------------------------------------------------- metrics


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB over all RGB samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(a, b, peak=1.0):
    """Mean structural similarity, Gaussian-weighted, averaged over channels.

    Local statistics use an 11x11 window (sigma 1.5) evaluated only where the
    window fits inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise DimensionError(
            f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape[:2]}"
        )
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    win = gaussian_window()

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, win.shape), win)

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def metric_pair(a, b, peak=1.0):
    return MetricPair(psnr(a, b, peak), ssim(a, b, peak))
