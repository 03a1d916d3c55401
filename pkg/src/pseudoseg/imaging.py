"""Deterministic 8-bit image kernels and the two enhancement chains.

All kernels take and return :class:`ImageBuffer` values, preserve size and
channel count, and round half away from zero.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ValidationError


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit raster held as a ``(height, width)`` or ``(height, width, 3)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValidationError(f"ImageBuffer needs uint8 samples, got {px.dtype}")
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if not (px.ndim == 2 or (px.ndim == 3 and px.shape[2] == 3)):
            raise ValidationError(f"ImageBuffer needs 1 or 3 channels, got shape {px.shape}")
        if px.shape[0] == 0 or px.shape[1] == 0:
            raise ValidationError("ImageBuffer must be non-empty")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def data(self) -> bytes:
        """Row-major samples, interleaved for 3-channel images."""
        return self.pixels.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, width: int, height: int, channels: int = 1) -> "ImageBuffer":
        if len(data) != width * height * channels:
            raise ValidationError(f"expected {width * height * channels} samples, got {len(data)}")
        shape = (height, width) if channels == 1 else (height, width, channels)
        return cls(np.frombuffer(data, dtype=np.uint8).reshape(shape).copy())

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    __hash__ = None


@dataclass(frozen=True)
class EnhanceParams:
    clahe_clip_limit: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    median_kernel: int = 5
    unsharp_sigma: float = 2.0
    unsharp_amount: float = 1.0

    def __post_init__(self):
        if not self.clahe_clip_limit > 0:
            raise ValidationError(f"clahe_clip_limit must be positive, got {self.clahe_clip_limit}")
        tx, ty = self.clahe_tiles
        if int(tx) != tx or int(ty) != ty or tx < 1 or ty < 1:
            raise ValidationError(f"clahe_tiles must be positive integers, got {self.clahe_tiles}")
        object.__setattr__(self, "clahe_tiles", (int(tx), int(ty)))
        if self.median_kernel < 3 or self.median_kernel % 2 == 0:
            raise ValidationError(f"median_kernel must be odd and >= 3, got {self.median_kernel}")
        if not self.unsharp_sigma > 0:
            raise ValidationError(f"unsharp_sigma must be positive, got {self.unsharp_sigma}")
        if not self.unsharp_amount >= 0:
            raise ValidationError(f"unsharp_amount must be nonnegative, got {self.unsharp_amount}")


@dataclass(frozen=True)
class JitterParams:
    hue_gain: float = 0.015
    sat_gain: float = 0.7
    val_gain: float = 0.4
    seed: int = 0

    def __post_init__(self):
        for name in ("hue_gain", "sat_gain", "val_gain"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


# -- CLAHE ---------------------------------------------------------------------


def clip_histogram(hist: np.ndarray, clip_count: int) -> np.ndarray:
    """Clip bins at ``clip_count`` and spread the excess once over all bins.

    The integer quotient goes to every bin; the remainder adds one count per
    bin starting from bin 0.
    """
    hist = hist.astype(np.int64).copy()
    excess = int(np.maximum(hist - clip_count, 0).sum())
    if excess == 0:
        return hist
    np.minimum(hist, clip_count, out=hist)
    n = hist.size
    hist += excess // n
    hist[: excess % n] += 1
    return hist


def tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """Equalization lookup table (256 entries) for one tile."""
    hist = np.bincount(tile.ravel(), minlength=256).astype(np.int64)
    total = int(tile.size)
    if math.isfinite(clip_limit):
        clip_count = max(1, int(math.floor(clip_limit * total / 256.0)))
        hist = clip_histogram(hist, clip_count)
    cdf = np.cumsum(hist)
    return _to_u8(255.0 * cdf / total)


def _tile_grid(img: np.ndarray, tiles: tuple[int, int]):
    tx, ty = tiles
    h, w = img.shape
    th, tw = -(-h // ty), -(-w // tx)
    padded = np.pad(img, ((0, th * ty - h), (0, tw * tx - w)), mode="edge")
    return padded, th, tw


def clahe_mappings(img: ImageBuffer, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Per-tile lookup tables, shape ``(tiles_y, tiles_x, 256)``."""
    if img.channels != 1:
        raise ContractError("clahe needs a single-channel image")
    tx, ty = tiles
    padded, th, tw = _tile_grid(img.pixels, (tx, ty))
    maps = np.empty((ty, tx, 256), dtype=np.uint8)
    for j in range(ty):
        for i in range(tx):
            maps[j, i] = tile_mapping(padded[j * th:(j + 1) * th, i * tw:(i + 1) * tw], clip_limit)
    return maps


def _axis_weights(n: int, tile: int, ntiles: int):
    # position in tile-center units; tiles beyond the edge replicate the edge tile
    g = (np.arange(n, dtype=np.float64) + 0.5) / tile - 0.5
    g0 = np.floor(g)
    frac = g - g0
    lo = np.clip(g0, 0, ntiles - 1).astype(np.intp)
    hi = np.clip(g0 + 1, 0, ntiles - 1).astype(np.intp)
    return lo, hi, frac


def clahe(img: ImageBuffer, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> ImageBuffer:
    """Contrast-limited adaptive histogram equalization of a grayscale image.

    ``tiles`` is ``(tiles_x, tiles_y)``. The image is edge-padded to a whole
    number of tiles and cropped back afterwards. ``clip_limit`` multiplies the
    mean bin height; pass ``math.inf`` to disable clipping.
    """
    if img.channels != 1:
        raise ContractError("clahe needs a single-channel image")
    if not clip_limit > 0:
        raise ValidationError(f"clip_limit must be positive, got {clip_limit}")
    tx, ty = int(tiles[0]), int(tiles[1])
    if tx < 1 or ty < 1:
        raise ValidationError(f"tiles must be positive, got {tiles}")
    maps = clahe_mappings(img, clip_limit, (tx, ty)).astype(np.float64)
    h, w = img.height, img.width
    th, tw = -(-h // ty), -(-w // tx)
    ylo, yhi, fy = _axis_weights(h, th, ty)
    xlo, xhi, fx = _axis_weights(w, tw, tx)

    v = img.pixels.astype(np.intp)
    Y0, X0 = ylo[:, None], xlo[None, :]
    Y1, X1 = yhi[:, None], xhi[None, :]
    top = maps[Y0, X0, v] * (1 - fx)[None, :] + maps[Y0, X1, v] * fx[None, :]
    bottom = maps[Y1, X0, v] * (1 - fx)[None, :] + maps[Y1, X1, v] * fx[None, :]
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return ImageBuffer(_to_u8(out))


# -- filters -------------------------------------------------------------------


def _per_channel(img: ImageBuffer, fn) -> ImageBuffer:
    if img.channels == 1:
        return ImageBuffer(fn(img.pixels))
    return ImageBuffer(np.stack([fn(img.pixels[:, :, c]) for c in range(3)], axis=2))


def median_blur(img: ImageBuffer, kernel: int = 5) -> ImageBuffer:
    """Median over a ``kernel x kernel`` window with edge replication."""
    if kernel < 3 or kernel % 2 == 0:
        raise ContractError(f"median kernel must be odd and >= 3, got {kernel}")
    r = kernel // 2
    mid = kernel * kernel // 2

    def med(ch):
        windows = sliding_window_view(np.pad(ch, r, mode="edge"), (kernel, kernel))
        flat = windows.reshape(ch.shape[0], ch.shape[1], kernel * kernel)
        return np.partition(flat, mid, axis=2)[:, :, mid]

    return _per_channel(img, med)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D kernel of radius ``ceil(3 sigma)``."""
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_float(ch: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    r = k.size // 2
    x = np.pad(ch.astype(np.float64), r, mode="edge")
    rows = sum(k[i] * x[:, i:i + ch.shape[1]] for i in range(k.size))
    return sum(k[i] * rows[i:i + ch.shape[0], :] for i in range(k.size))


def gaussian_blur(img: ImageBuffer, sigma: float) -> ImageBuffer:
    """Separable Gaussian blur, edge replication, float accumulation."""
    return _per_channel(img, lambda ch: _to_u8(_blur_float(ch, sigma)))


def unsharp_mask(img: ImageBuffer, sigma: float = 2.0, amount: float = 1.0) -> ImageBuffer:
    """``orig + amount * (orig - gaussian_blur(orig))``, rounded and clamped."""
    if amount < 0:
        raise ValidationError(f"amount must be nonnegative, got {amount}")
    blurred = gaussian_blur(img, sigma).pixels.astype(np.float64)
    orig = img.pixels.astype(np.float64)
    return ImageBuffer(_to_u8(orig + amount * (orig - blurred)))


# -- color ---------------------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone conversion. Input is float RGB in [0, 1]; H in degrees [0, 360)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = np.max(rgb, axis=-1)
    mn = np.min(rgb, axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    h = np.where(delta > 0, h * 60.0, 0.0) % 360.0
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return h, s, mx


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    hp = (h % 360.0) / 60.0
    c = v * s
    x = c * (1 - np.abs(hp % 2.0 - 1))
    m = v - c
    sector = np.floor(hp).astype(np.intp) % 6
    zero = np.zeros_like(c)
    table = [(c, x, zero), (x, c, zero), (zero, c, x), (zero, x, c), (x, zero, c), (c, zero, x)]
    out = np.zeros(h.shape + (3,), dtype=np.float64)
    for k, (r1, g1, b1) in enumerate(table):
        sel = sector == k
        out[sel, 0] = r1[sel]
        out[sel, 1] = g1[sel]
        out[sel, 2] = b1[sel]
    return out + m[..., None]


def draw_jitter_factors(params: JitterParams, rng: Optional[np.random.Generator] = None) -> tuple[float, float, float]:
    """Draw (hue shift in turns, saturation factor, value factor)."""
    if rng is None:
        rng = np.random.default_rng(params.seed)
    u = rng.uniform(-1.0, 1.0, 3)
    return (
        float(u[0] * params.hue_gain),
        float(1.0 + u[1] * params.sat_gain),
        float(1.0 + u[2] * params.val_gain),
    )


def hsv_adjust(img: ImageBuffer, hue_shift: float, sat_factor: float, val_factor: float) -> ImageBuffer:
    """Rotate hue by ``hue_shift`` turns and scale saturation/value (clamped to [0, 1])."""
    if img.channels != 3:
        raise ContractError("hsv adjustment needs a 3-channel image")
    h, s, v = rgb_to_hsv(img.pixels.astype(np.float64) / 255.0)
    h = (h + 360.0 * hue_shift) % 360.0
    s = np.clip(s * sat_factor, 0.0, 1.0)
    v = np.clip(v * val_factor, 0.0, 1.0)
    return ImageBuffer(_to_u8(hsv_to_rgb(h, s, v) * 255.0))


def hsv_jitter(img: ImageBuffer, params: JitterParams, rng: Optional[np.random.Generator] = None) -> ImageBuffer:
    if img.channels != 3:
        raise ContractError("hsv_jitter needs a 3-channel image")
    return hsv_adjust(img, *draw_jitter_factors(params, rng))


def image_rng(seed: int, image_id: int) -> np.random.Generator:
    """Per-image generator keyed by (seed, image id), independent of processing order."""
    return np.random.default_rng([int(seed) & (2**64 - 1), int(image_id)])


# -- luma path for color CLAHE -----------------------------------------------------


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """Full-range Rec.601 (JPEG) YCbCr."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def clahe_any(img: ImageBuffer, clip_limit: float, tiles: tuple[int, int]) -> ImageBuffer:
    """CLAHE for grayscale, or CLAHE on Rec.601 luma with chroma kept for RGB."""
    if img.channels == 1:
        return clahe(img, clip_limit, tiles)
    ycc = rgb_to_ycbcr(img.pixels.astype(np.float64))
    luma = ImageBuffer(_to_u8(ycc[..., 0]))
    ycc[..., 0] = clahe(luma, clip_limit, tiles).pixels
    return ImageBuffer(_to_u8(ycbcr_to_rgb(ycc)))


# -- chains --------------------------------------------------------------------

CHAINS = ("soft", "final", "none")


def enhance_soft(img: ImageBuffer, params: EnhanceParams = EnhanceParams()) -> ImageBuffer:
    """CLAHE followed by median blur; used before training the intermediate model."""
    out = clahe_any(img, params.clahe_clip_limit, params.clahe_tiles)
    return median_blur(out, params.median_kernel)


def enhance_final(img: ImageBuffer, params: EnhanceParams = EnhanceParams()) -> ImageBuffer:
    """Unsharp mask followed by CLAHE; used on the combined dataset."""
    out = unsharp_mask(img, params.unsharp_sigma, params.unsharp_amount)
    return clahe_any(out, params.clahe_clip_limit, params.clahe_tiles)


def enhance(img: ImageBuffer, chain: str, params: EnhanceParams = EnhanceParams()) -> ImageBuffer:
    if chain == "soft":
        return enhance_soft(img, params)
    if chain == "final":
        return enhance_final(img, params)
    if chain == "none":
        return img
    raise ValidationError(f"unknown enhancement chain {chain!r}; expected one of {CHAINS}")


# -- geometric image transforms ------------------------------------------------------


def hflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[:, ::-1].copy())


def vflip(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(img.pixels[::-1].copy())


def translate(img: ImageBuffer, dx: int, dy: int, fill: int = 0) -> ImageBuffer:
    """Shift content by whole pixels; uncovered area is filled with ``fill``."""
    src = img.pixels
    out = np.full_like(src, fill)
    h, w = src.shape[:2]
    dx, dy = int(dx), int(dy)
    if abs(dx) < w and abs(dy) < h:
        out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = src[
            max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)
        ]
    return ImageBuffer(out)


def scale(img: ImageBuffer, factor: float, fill: int = 0) -> ImageBuffer:
    """Zoom about the image center with nearest-neighbour sampling."""
    if not factor > 0:
        raise ValidationError(f"scale factor must be positive, got {factor}")
    src = img.pixels
    h, w = src.shape[:2]
    # inverse map of output pixel centers, consistent with the polygon mapping
    xs = (np.arange(w) + 0.5 - w / 2.0) / factor + w / 2.0
    ys = (np.arange(h) + 0.5 - h / 2.0) / factor + h / 2.0
    xi = np.floor(xs).astype(np.intp)
    yi = np.floor(ys).astype(np.intp)
    vx = (xi >= 0) & (xi < w)
    vy = (yi >= 0) & (yi < h)
    out = np.full_like(src, fill)
    sub = src[np.clip(yi, 0, h - 1)][:, np.clip(xi, 0, w - 1)]
    valid = vy[:, None] & vx[None, :]
    out[valid] = sub[valid]
    return ImageBuffer(out)


# -- PNG I/O -------------------------------------------------------------------------


def decode_png(data: bytes) -> ImageBuffer:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        im.load()
        if im.mode in ("L", "RGB"):
            arr = np.asarray(im, dtype=np.uint8)
        elif im.mode in ("I;16", "I;16B", "I", "F"):
            raise ValidationError(f"unsupported bit depth (mode {im.mode}); only 8-bit images are handled")
        elif im.mode in ("LA", "La", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageBuffer(arr.copy())


def encode_png(img: ImageBuffer) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img.pixels)).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def read_png(path) -> ImageBuffer:
    with open(path, "rb") as f:
        return decode_png(f.read())


def write_png(img: ImageBuffer, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_png(img))
