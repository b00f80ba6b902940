"""Raster primitives: image validation, the pattern and its mask, total variation,
interval projection and PNG persistence."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidArgumentError

MIN_IMAGE_SIDE = 8

DEFAULT_LOWER = 0.1
DEFAULT_UPPER = 0.85


def check_image(x, name="image") -> np.ndarray:
    """Validate an H x W x 3 raster with values in [0, 1]. Returns it as a float array."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3:
        raise InvalidArgumentError(f"{name} must be H x W x 3, got shape {x.shape}")
    if x.shape[0] < MIN_IMAGE_SIDE or x.shape[1] < MIN_IMAGE_SIDE:
        raise InvalidArgumentError(f"{name} must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {x.shape[:2]}")
    if not np.issubdtype(x.dtype, np.floating):
        raise InvalidArgumentError(f"{name} must be a float raster, got {x.dtype}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise InvalidArgumentError(f"{name} values must lie in [0, 1]")
    return x


@dataclass
class Pattern:
    """The optimized raster together with its per-channel printable interval."""

    pixels: np.ndarray
    lower: np.ndarray = field(default_factory=lambda: np.full(3, DEFAULT_LOWER))
    upper: np.ndarray = field(default_factory=lambda: np.full(3, DEFAULT_UPPER))

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.size == 0:
            raise InvalidArgumentError(f"pattern must be a nonempty Ph x Pw x C array, got {self.pixels.shape}")
        c = self.pixels.shape[2]
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=np.float64), (c,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=np.float64), (c,)).copy()
        if np.any(self.lower < 0) or np.any(self.upper > 1) or np.any(self.lower >= self.upper):
            raise InvalidArgumentError(f"interval must satisfy 0 <= lower < upper <= 1, got {self.lower}, {self.upper}")

    @property
    def shape(self):
        return self.pixels.shape[:2]

    @classmethod
    def midpoint(cls, height, width, lower=DEFAULT_LOWER, upper=DEFAULT_UPPER, channels=3) -> "Pattern":
        lo = np.broadcast_to(np.asarray(lower, dtype=np.float64), (channels,))
        hi = np.broadcast_to(np.asarray(upper, dtype=np.float64), (channels,))
        pixels = np.broadcast_to((lo + hi) / 2.0, (height, width, channels)).copy()
        return cls(pixels, lo, hi)

    def with_pixels(self, pixels) -> "Pattern":
        return Pattern(pixels, self.lower, self.upper)

    def within_interval(self) -> bool:
        return bool(np.all(self.pixels >= self.lower) and np.all(self.pixels <= self.upper))


@dataclass
class Mask:
    """Binary shape restricting where the pattern exists."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2-D, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise InvalidArgumentError("mask values must be exactly 0 or 1")
        if not np.any(v == 1):
            raise InvalidArgumentError("mask must contain at least one 1")
        self.values = v.astype(np.float64)

    @property
    def shape(self):
        return self.values.shape


def make_mask(height, width, kind="full") -> Mask:
    """Build a mask of a named shape.

    ``full`` covers the whole raster, ``ellipse`` the inscribed ellipse, and
    ``shield`` a badge-like outline (flat top, rounded point at the bottom).
    """
    if kind == "full":
        return Mask(np.ones((height, width)))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ry, rx = max(height / 2.0, 0.5), max(width / 2.0, 0.5)
    if kind == "ellipse":
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    elif kind == "shield":
        upper_half = yy <= cy
        lower_half = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        inside = upper_half | lower_half
    else:
        raise InvalidArgumentError(f"unknown mask kind {kind!r}")
    return Mask(inside.astype(np.float64))


def total_variation(p):
    """Isotropic total variation of a pattern and its gradient.

    Each pixel contributes sqrt(dv**2 + dh**2), where dv/dh are the differences to
    the next row/column; missing neighbours at the border contribute a zero
    difference. Channels are summed. The derivative of sqrt at 0 is taken as 0.

    Accepts a :class:`Pattern`, an H x W x C array or an H x W array. The
    gradient has the shape of the input array.
    """
    d = p.pixels if isinstance(p, Pattern) else np.asarray(p, dtype=np.float64)
    if d.size == 0:
        raise InvalidArgumentError("total variation of an empty pattern is undefined")
    squeeze = d.ndim == 2
    if squeeze:
        d = d[:, :, None]
    dv = np.zeros_like(d)
    dh = np.zeros_like(d)
    dv[:-1] = d[:-1] - d[1:]
    dh[:, :-1] = d[:, :-1] - d[:, 1:]
    norm = np.sqrt(dv * dv + dh * dh)
    tv = float(norm.sum())

    nz = norm > 0
    safe = np.where(nz, norm, 1.0)
    gv = np.where(nz, dv / safe, 0.0)
    gh = np.where(nz, dh / safe, 0.0)
    grad = gv + gh
    grad[1:] -= gv[:-1]
    grad[:, 1:] -= gh[:, :-1]
    if squeeze:
        grad = grad[:, :, 0]
    return tv, grad


def project_interval(p: Pattern) -> Pattern:
    """Clamp every pixel into the pattern's [lower, upper] interval."""
    return p.with_pixels(np.clip(p.pixels, p.lower, p.upper))


def to_uint8(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, x) -> None:
    arr = to_uint8(x)
    PILImage.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def save_pattern(path, pattern: Pattern, mask: Mask | None = None) -> dict:
    """Write ``<path>`` as 8-bit PNG plus ``<path>.json`` (interval, size) and an optional mask PNG."""
    path = Path(path)
    save_png(path, pattern.pixels)
    meta = {
        "height": int(pattern.shape[0]),
        "width": int(pattern.shape[1]),
        "lower": [float(v) for v in pattern.lower],
        "upper": [float(v) for v in pattern.upper],
        "mask": None,
    }
    if mask is not None:
        mask_path = path.with_name(path.stem + "_mask.png")
        PILImage.fromarray((mask.values * 255).astype(np.uint8), mode="L").save(mask_path, format="PNG")
        meta["mask"] = mask_path.name
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def load_pattern(path):
    """Read a pattern written by :func:`save_pattern`; returns (Pattern, Mask or None).

    8-bit quantization can push a value just outside the interval, so the loaded
    pattern is projected back into it.
    """
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    pixels = load_png(path).astype(np.float64)
    if pixels.shape[:2] != (meta["height"], meta["width"]):
        raise InvalidArgumentError(f"pattern PNG size {pixels.shape[:2]} disagrees with metadata")
    pattern = project_interval(Pattern(pixels, meta["lower"], meta["upper"]))
    mask = None
    if meta.get("mask"):
        with PILImage.open(path.with_name(meta["mask"])) as im:
            mask = Mask((np.asarray(im.convert("L")) >= 128).astype(np.float64))
    return pattern, mask
