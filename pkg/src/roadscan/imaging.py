"""Image decoding, resizing, thresholding and normalization.

Pixels live in [0,1] as float64, row-major and channel-interleaved.
Supported codecs are deliberately narrow: 8-bit PNG (via Pillow),
binary PPM (P6) and PGM (P5). Thresholding quantizes to 256 levels so
the Otsu sweep and the adaptive local-mean comparison are exact
integer arithmetic.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


class DecodeError(ValueError):
    """Input bytes are not a supported image."""


class ParameterError(ValueError):
    """A thresholding/normalization parameter is out of range."""


@dataclass
class ImageBuffer:
    """H x W x C grid of pixels in [0,1]."""

    height: int
    width: int
    channels: int
    pixels: np.ndarray  # shape (H, W, C), float64

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(
            self.height, self.width, self.channels
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(h, w, c, arr)


@dataclass
class BinaryImage:
    """Boolean mask; True marks foreground."""

    height: int
    width: int
    bits: np.ndarray  # shape (H, W), bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(self.height, self.width)


# -- codecs ------------------------------------------------------------


def _decode_pnm(data: bytes) -> ImageBuffer:
    magic = data[:2]
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and '#' comments between header tokens
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated PNM header")
        fields.append(data[start:pos])
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise DecodeError(f"non-numeric PNM header fields {fields!r}") from None
    if maxval != 255:
        raise DecodeError(f"unsupported PNM maxval {maxval} (only 8-bit supported)")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height * channels]
    if len(raster) != width * height * channels:
        raise DecodeError("PNM raster shorter than header promises")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return ImageBuffer(height, width, channels, arr.astype(np.float64) / 255.0)


def _decode_png(data: bytes) -> ImageBuffer:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except UnidentifiedImageError:
        raise DecodeError("bytes are not a recognizable PNG") from None
    if img.format != "PNG":
        raise DecodeError(f"unsupported image format {img.format!r}")
    mode = img.mode
    if mode in ("RGBA", "LA"):
        # drop alpha
        img = img.convert(mode[:-1])
        mode = img.mode
    if mode == "L":
        channels = 1
    elif mode == "RGB":
        channels = 3
    else:
        raise DecodeError(f"unsupported PNG mode {mode!r} (need 8-bit gray or RGB)")
    arr = np.asarray(img, dtype=np.uint8)
    return ImageBuffer.from_array(arr.astype(np.float64) / 255.0)


def decode_image(data: bytes) -> ImageBuffer:
    """Decode PNG (8-bit gray/RGB) or binary PPM/PGM bytes."""
    if data[:2] in (b"P5", b"P6"):
        return _decode_pnm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(data)
    raise DecodeError(f"unrecognized magic bytes {data[:8]!r}")


def encode_pnm(img: ImageBuffer) -> bytes:
    """Encode as binary PGM (1 channel) or PPM (3 channels)."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode()
    raster = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8).tobytes()
    return header + raster


def encode_binary_pgm(mask: BinaryImage) -> bytes:
    """Serialize a binary mask as a 0/255 PGM."""
    img = ImageBuffer(mask.height, mask.width, 1, mask.bits.astype(np.float64))
    return encode_pnm(img)


def write_png(img: ImageBuffer, path) -> None:
    arr = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    if img.channels == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(path, format="PNG")


# -- geometry and color ------------------------------------------------


def resize_bilinear(img: ImageBuffer, out_h: int, out_w: int) -> ImageBuffer:
    """Bilinear resize with the half-pixel-centers convention."""
    if out_h < 1 or out_w < 1:
        raise ParameterError("output size must be at least 1x1")
    src_y = (np.arange(out_h) + 0.5) * (img.height / out_h) - 0.5
    src_x = (np.arange(out_w) + 0.5) * (img.width / out_w) - 0.5
    src_y = np.clip(src_y, 0.0, img.height - 1)
    src_x = np.clip(src_x, 0.0, img.width - 1)
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    y1 = np.minimum(y0 + 1, img.height - 1)
    x1 = np.minimum(x0 + 1, img.width - 1)
    wy = (src_y - y0)[:, None, None]
    wx = (src_x - x0)[None, :, None]
    p = img.pixels
    top = p[y0][:, x0] * (1 - wx) + p[y0][:, x1] * wx
    bot = p[y1][:, x0] * (1 - wx) + p[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return ImageBuffer(out_h, out_w, img.channels, out)


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    """Luma conversion 0.299 R + 0.587 G + 0.114 B; gray passes through."""
    if img.channels == 1:
        return img
    luma = img.pixels @ np.array(GRAY_WEIGHTS)
    return ImageBuffer(img.height, img.width, 1, luma[:, :, None])


# -- thresholding ------------------------------------------------------


def quantize_levels(img: ImageBuffer) -> np.ndarray:
    """Map [0,1] pixels to integer levels 0..255 (round-half-up)."""
    return np.floor(img.pixels[:, :, 0] * 255.0 + 0.5).astype(np.int64)


def otsu_threshold(img: ImageBuffer) -> tuple[int, BinaryImage]:
    """Global threshold maximizing between-class variance.

    The sweep covers t in [0,254] with class 0 = levels <= t; ties go
    to the smallest t. Foreground = level > t.
    """
    if img.channels != 1:
        raise ParameterError("otsu_threshold expects a grayscale image")
    levels = quantize_levels(img)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) <= 1:
        # single-valued image: no split exists, everything is background
        return 0, BinaryImage(img.height, img.width, np.zeros_like(levels, dtype=bool))
    total = hist.sum()
    prob = hist / total
    omega0 = np.cumsum(prob)[:255]
    omega1 = 1.0 - omega0
    cum_mean = np.cumsum(prob * np.arange(256))[:255]
    mu_total = (prob * np.arange(256)).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(omega0 > 0, cum_mean / omega0, 0.0)
        mu1 = np.where(omega1 > 0, (mu_total - cum_mean) / omega1, 0.0)
    sigma_b = omega0 * omega1 * (mu0 - mu1) ** 2
    t = int(np.argmax(sigma_b))  # argmax returns the first (smallest) maximizer
    return t, BinaryImage(img.height, img.width, levels > t)


def adaptive_threshold(img: ImageBuffer, block: int, c: float) -> BinaryImage:
    """Local-mean thresholding: foreground where level > mean(block) - c*255.

    The block x block neighborhood is border-replicated. Arithmetic runs
    on integer levels so a constant image compares exactly against its
    own mean.
    """
    if img.channels != 1:
        raise ParameterError("adaptive_threshold expects a grayscale image")
    if block < 3 or block % 2 == 0:
        raise ParameterError(f"block must be an odd integer >= 3, got {block}")
    levels = quantize_levels(img)
    r = block // 2
    padded = np.pad(levels, r, mode="edge")
    # exact integer window sums via a 2-D summed-area table
    sat = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    np.cumsum(padded, axis=0, out=sat[1:, 1:])
    np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
    h, w = levels.shape
    s = (
        sat[block : block + h, block : block + w]
        - sat[:h, block : block + w]
        - sat[block : block + h, :w]
        + sat[:h, :w]
    )
    local_mean = s / float(block * block)
    bits = levels > (local_mean - c * 255.0)
    return BinaryImage(img.height, img.width, bits)


def normalize_image(img: ImageBuffer, mean, std) -> np.ndarray:
    """Standardize per channel and convert layout to [C,H,W] float32."""
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (img.channels,))
    std = np.broadcast_to(np.asarray(std, dtype=np.float64), (img.channels,))
    if np.any(std <= 0):
        raise ParameterError("std must be positive per channel")
    out = (img.pixels - mean) / std
    return np.transpose(out, (2, 0, 1)).astype(np.float32)
