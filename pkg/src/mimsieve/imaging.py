"""Image decoding, patch grids, augmentation, and perceptual hashing.

Binary PGM (P5) and PPM (P6) are the native storage formats so the core has
no codec dependency; PNG decoding is feature-gated on Pillow.  All pixel
work is uint8 in, float in [0,1] out (patch grids), and every random
operation is a pure function of its seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from . import rng
from .errors import CapabilityError, ContractError, ParseError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R 601


@dataclass
class Image:
    """A decoded image: uint8 pixels of shape (height, width, channels)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ContractError(f"Image: expected (H, W, 1|3) pixels, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ContractError("Image: width and height must be >= 1")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def to_gray(self) -> np.ndarray:
        """Float64 luma plane (H, W); identity for single-channel images."""
        if self.channels == 1:
            return self.pixels[:, :, 0].astype(np.float64)
        return self.pixels.astype(np.float64) @ LUMA_WEIGHTS

    def to_channels(self, channels: int) -> "Image":
        """Replicate gray to RGB or collapse RGB to luma, as requested."""
        if channels == self.channels:
            return self
        if channels == 3 and self.channels == 1:
            return Image(np.repeat(self.pixels, 3, axis=2))
        if channels == 1 and self.channels == 3:
            return Image(np.clip(np.rint(self.to_gray()), 0, 255).astype(np.uint8))
        raise ContractError(f"cannot convert {self.channels}-channel image to {channels} channels")


@dataclass
class PatchGrid:
    """Non-overlapping square patches, values scaled to [0, 1].

    ``patches`` has shape (N, p*p*C) with row-major patch order and row-major
    pixel order (channels innermost) inside each patch.
    """

    patch_size: int
    rows: int
    cols: int
    channels: int
    patches: np.ndarray

    @property
    def n(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class PerceptualHash:
    """64-bit DCT sign fingerprint; rendered as 16 hex digits."""

    bits: int

    @property
    def hex(self) -> str:
        return f"{self.bits:016x}"

    def __str__(self) -> str:
        return self.hex

    def hamming(self, other: "PerceptualHash") -> int:
        return (self.bits ^ other.bits).bit_count()


def hamming64(a: int, b: int) -> int:
    return (a ^ b).bit_count()


# -- PNM decoding ------------------------------------------------------


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise ParseError("unexpected end of header", pos)
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def _read_int(data: bytes, pos: int, what: str) -> tuple[int, int]:
    token, end = _read_token(data, pos)
    if not token.isdigit():
        raise ParseError(f"expected integer for {what}, got {token!r}", pos)
    return int(token), end


def decode(data: bytes, fmt: str) -> Image:
    """Decode a PGM (P5), PPM (P6), or PNG byte string.

    16-bit PNM sources are rescaled to 8-bit by dropping the low byte.
    """
    if fmt == "png":
        return _decode_png(data)
    if fmt not in ("pgm", "ppm"):
        raise CapabilityError(f"unsupported image format: {fmt}")
    magic_expected = b"P5" if fmt == "pgm" else b"P6"
    channels = 1 if fmt == "pgm" else 3
    magic, pos = _read_token(data, 0)
    if magic != magic_expected:
        raise ParseError(f"bad magic {magic!r}, expected {magic_expected!r}", 0)
    width, pos = _read_int(data, pos, "width")
    height, pos = _read_int(data, pos, "height")
    maxval, pos = _read_int(data, pos, "maxval")
    if width < 1 or height < 1:
        raise ParseError(f"bad dimensions {width}x{height}", pos)
    if not 0 < maxval < 65536:
        raise ParseError(f"bad maxval {maxval}", pos)
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    two_byte = maxval > 255
    count = width * height * channels
    need = count * (2 if two_byte else 1)
    if len(data) - pos < need:
        raise ParseError("truncated pixel payload", len(data))
    raw = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    if two_byte:
        raw = raw.reshape(-1, 2)[:, 0]  # PNM stores big-endian; keep high byte
    return Image(raw.reshape(height, width, channels))


def _decode_png(data: bytes) -> Image:
    try:
        from PIL import Image as PILImage
    except ImportError as exc:
        raise CapabilityError("PNG support requires Pillow (install extra 'png')") from exc
    import io

    with PILImage.open(io.BytesIO(data)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode not in ("1", "I;16", "I") else "L")
        arr = np.asarray(im)
    if arr.dtype == np.uint16:
        arr = (arr >> 8).astype(np.uint8)
    return Image(arr)


def encode_pnm(img: Image) -> bytes:
    """Binary PGM for 1-channel images, binary PPM for 3-channel."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + img.pixels.tobytes()


# -- patch grids -------------------------------------------------------


def patchify(img: Image, p: int, dtype=np.float32) -> PatchGrid:
    """Split into (H*W)/p^2 non-overlapping p x p patches, scaled to [0,1]."""
    h, w, c = img.pixels.shape
    if p < 1 or h % p != 0 or w % p != 0:
        raise ContractError(f"patchify: H={h}, W={w} must both be divisible by p={p}")
    rows, cols = h // p, w // p
    x = img.pixels.reshape(rows, p, cols, p, c)
    x = x.transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * c)
    return PatchGrid(patch_size=p, rows=rows, cols=cols, channels=c, patches=x.astype(dtype) / dtype(255))


def unpatchify(grid: PatchGrid) -> Image:
    """Exact inverse of ``patchify``."""
    p, rows, cols, c = grid.patch_size, grid.rows, grid.cols, grid.channels
    x = grid.patches.reshape(rows, cols, p, p, c).transpose(0, 2, 1, 3, 4)
    x = x.reshape(rows * p, cols * p, c)
    return Image(np.clip(np.rint(x.astype(np.float64) * 255.0), 0, 255).astype(np.uint8))


# -- resizing and augmentation ----------------------------------------


def bilinear_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample (H, W[, C]) float array, half-pixel-center convention."""
    src = np.asarray(pixels, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    h, w, _ = src.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def augment(img: Image, rng_seed: int, target: int) -> Image:
    """Random-resized-crop to target x target, then horizontal flip with p=0.5.

    The crop area fraction is uniform in [0.2, 1.0] of the source; the square
    crop side is clamped to the image and the crop is bilinearly resized to
    the target (upscaling when the crop is smaller).  Deterministic in
    ``rng_seed``.
    """
    h, w = img.height, img.width
    if h < 16 or w < 16:
        raise ContractError(f"augment: image {w}x{h} is smaller than 16x16")
    gen = rng.generator(rng_seed, "augment")
    scale = gen.uniform(0.2, 1.0)
    side = int(np.sqrt(scale * h * w))
    side = max(1, min(side, h, w))
    y0 = int(gen.integers(0, h - side + 1))
    x0 = int(gen.integers(0, w - side + 1))
    crop = img.pixels[y0 : y0 + side, x0 : x0 + side, :].astype(np.float64)
    out = bilinear_resize(crop, target, target)
    if gen.uniform() < 0.5:
        out = out[:, ::-1, :]
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


# -- perceptual hash ---------------------------------------------------


def phash64(img: Image) -> PerceptualHash:
    """64-bit perceptual hash.

    Recipe (pinned; hashes are bit-exact functions of pixel content):
    luma-convert, bilinear-resize to 32x32, unnormalized 2-D DCT-II, keep the
    top-left 8x8 coefficient block, set each non-DC bit to coefficient >
    median of the 63 non-DC coefficients, fix the DC slot to 0.  Bits are
    packed row-major, most significant first.
    """
    gray = img.to_gray()
    small = bilinear_resize(gray, 32, 32)
    coefs = scipy.fft.dctn(small, type=2)
    block = coefs[:8, :8]
    flat = block.reshape(-1)
    median = np.median(flat[1:])
    bits = 0
    for q in range(1, 64):
        if flat[q] > median:
            bits |= 1 << (63 - q)
    return PerceptualHash(bits)
