"""Image decoding, resizing, normalization, color transforms, and LBP codes.

All functions here are pure and operate on float64 arrays scaled to [0, 1];
they are safe to call concurrently on distinct images. Quantization to 8-bit
only happens at file boundaries (decode / write).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DecodeError, DimensionError

# Grayscale weights applied to (R, G, B); they sum to 0.9999.
GRAY_WEIGHTS = (0.2989, 0.5870, 0.1140)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# sRGB -> XYZ (D65). Row sums equal the white point, so neutral grays land
# exactly on the Lab neutral axis.
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65_WHITE = np.array([0.95047, 1.0, 1.08883])


@dataclass
class RgbImage:
    """RGB raster with float64 channel values in [0, 1]."""

    data: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise DimensionError(f"RgbImage expects (H, W, 3), got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class NormalizedImage:
    """Mean/std-shifted image, every value in [-1, 1] for the default 0.5/0.5."""

    data: np.ndarray  # (H, W, 3)


def decode(path) -> RgbImage:
    """Decode a PNG or binary PPM (P6) file; 8-bit channels map to v/255."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
    except OSError as exc:
        raise DecodeError(f"cannot read {path}: {exc}") from exc
    if head == b"P6":
        return _decode_ppm(path)
    return _decode_png(path)


def _decode_png(path) -> RgbImage:
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise DecodeError(f"{path}: unsupported format {img.format}")
            if img.mode != "RGB":
                raise DecodeError(f"{path}: unsupported mode {img.mode}, need RGB")
            pixels = np.asarray(img, dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return RgbImage(pixels / 255.0)


def _decode_ppm(path) -> RgbImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 2  # past "P6"
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: truncated PPM header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DecodeError(f"{path}: bad PPM header fields {fields}") from exc
    if maxval != 255:
        raise DecodeError(f"{path}: unsupported PPM maxval {maxval}")
    expected = width * height * 3
    raster = blob[pos:pos + expected]
    if len(raster) != expected:
        raise DecodeError(
            f"{path}: PPM raster has {len(raster)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return RgbImage(pixels.astype(np.float64) / 255.0)


def write_ppm(path, img: RgbImage) -> None:
    """Write a binary PPM (P6) with rounded 8-bit channels."""
    quantized = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def write_pgm(path, values: np.ndarray) -> None:
    """Write a 2-D array as binary PGM (P5), rescaled so the max maps to 255."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    scaled = values / top if top > 0 else values
    quantized = np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)
    height, width = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def _interp_coords(extent: int, target: int):
    """Source sample positions for one axis (half-pixel centers, edge-clamped)."""
    coords = (np.arange(target) + 0.5) * (extent / target) - 0.5
    coords = np.clip(coords, 0.0, extent - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, extent - 1)
    return lo, hi, coords - lo


def resize(img: RgbImage, target: int) -> RgbImage:
    """Bilinear resize to target x target (half-pixel-center convention).

    Model inputs are expected at target >= 8; smaller targets are computed
    with the same interpolation rule (useful for hand-checkable oracles).
    """
    src = img.data
    height, width = src.shape[:2]
    if height == target and width == target:
        return RgbImage(src.copy())
    r_lo, r_hi, r_frac = _interp_coords(height, target)
    c_lo, c_hi, c_frac = _interp_coords(width, target)
    r_frac = r_frac[:, None, None]
    c_frac = c_frac[None, :, None]
    top = src[r_lo][:, c_lo] * (1 - c_frac) + src[r_lo][:, c_hi] * c_frac
    bottom = src[r_hi][:, c_lo] * (1 - c_frac) + src[r_hi][:, c_hi] * c_frac
    return RgbImage(top * (1 - r_frac) + bottom * r_frac)


def normalize(img: RgbImage, mean: float = 0.5, std: float = 0.5) -> NormalizedImage:
    """(v - mean) / std per channel; defaults realize the [-1, 1] range exactly."""
    if std <= 0:
        raise ConfigError(f"normalize std must be positive, got {std}")
    return NormalizedImage((img.data - mean) / std)


def denormalize(img: NormalizedImage, mean: float = 0.5, std: float = 0.5) -> RgbImage:
    return RgbImage(img.data * std + mean)


def to_grayscale(img: RgbImage) -> np.ndarray:
    """Weighted luminance with fixed coefficients (output in [0, 0.9999])."""
    r, g, b = GRAY_WEIGHTS
    return r * img.data[:, :, 0] + g * img.data[:, :, 1] + b * img.data[:, :, 2]


def to_ycbcr_cr(img: RgbImage) -> np.ndarray:
    """Full-range BT.601 Cr channel, offset by +0.5 so the result lies in [0, 1]."""
    red = img.data[:, :, 0]
    luma = 0.299 * red + 0.587 * img.data[:, :, 1] + 0.114 * img.data[:, :, 2]
    return 0.5 + (red - luma) / 1.402


def to_lab_a(img: RgbImage) -> np.ndarray:
    """CIE Lab a-channel (sRGB, D65), rescaled from [-128, 127] to [0, 1].

    Neutral grays map to a = 0 before rescaling, i.e. 128/255 after.
    """
    srgb = img.data
    linear = np.where(
        srgb <= 0.04045, srgb / 12.92, ((srgb + 0.055) / 1.055) ** 2.4
    )
    xyz = linear @ _SRGB_TO_XYZ.T
    ratio = xyz / _D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(
        ratio > delta**3, np.cbrt(ratio), ratio / (3 * delta**2) + 4.0 / 29.0
    )
    a_star = 500.0 * (f[:, :, 0] - f[:, :, 1])
    return np.clip((a_star + 128.0) / 255.0, 0.0, 1.0)


def lbp(gray: np.ndarray) -> np.ndarray:
    """8-neighbor radius-1 local binary patterns, codes 0..255.

    Bits are taken clockwise from the top-left neighbor, most significant
    first; a neighbor >= center sets its bit. The one-pixel border is dropped,
    so the result is (H-2) x (W-2). A constant image yields all-255 codes.
    """
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.shape[0] < 3 or gray.shape[1] < 3:
        raise DimensionError(f"lbp needs at least 3x3 grayscale input, got {gray.shape}")
    center = gray[1:-1, 1:-1]
    clockwise = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]
    codes = np.zeros(center.shape, dtype=np.int64)
    for bit, (dr, dc) in enumerate(clockwise):
        neighbor = gray[1 + dr:gray.shape[0] - 1 + dr, 1 + dc:gray.shape[1] - 1 + dc]
        codes |= (neighbor >= center).astype(np.int64) << (7 - bit)
    return codes
