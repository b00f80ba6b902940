"""Simulated physical conditions and a synthetic multi-camera person dataset.

* :func:`degrade` perturbs brightness and focus of an image.
* :func:`synth_augment` shifts and rescales an image together with its anchor quad.
* :func:`generate_toy_dataset` renders simple clothed figures seen by cameras that
  each impose their own colour cast, contrast and viewpoint.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import ReIDDataset, Sample
from .errors import AugmentationError, ConfigError
from .geometry import AnchorQuad, estimate_homography

# ---------------------------------------------------------------------------
# degradation


@dataclass(frozen=True)
class DegradeParams:
    brightness_range: tuple = (0.7, 1.3)
    blur_sigma_range: tuple = (0.0, 1.2)

    def __post_init__(self):
        b0, b1 = self.brightness_range
        s0, s1 = self.blur_sigma_range
        if not (0 < b0 <= b1 <= 2):
            raise ConfigError(f"brightness_range must lie in (0, 2], got {self.brightness_range}")
        if not (0 <= s0 <= s1 <= 3):
            raise ConfigError(f"blur_sigma_range must lie in [0, 3], got {self.blur_sigma_range}")

    @classmethod
    def identity(cls) -> "DegradeParams":
        return cls((1.0, 1.0), (0.0, 0.0))


def sample_degradation(dp: DegradeParams, rng: np.random.Generator):
    """Draw (brightness factor, blur sigma). Always consumes two uniforms from ``rng``."""
    b = rng.uniform(*dp.brightness_range)
    s = rng.uniform(*dp.blur_sigma_range)
    return float(b), float(s)


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    with np.errstate(over="ignore"):
        w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def apply_degradation(x, brightness: float, sigma: float):
    """Scale by ``brightness``, clamp to [0, 1], then separable Gaussian blur (replicate borders).

    ``x`` is an H x W x 3 (or N x H x W x 3) numpy array or torch tensor; torch
    inputs stay differentiable.
    """
    if not isinstance(x, torch.Tensor):
        arr = np.asarray(x)
        out = apply_degradation(torch.from_numpy(arr.astype(np.float64)), brightness, sigma)
        return out.numpy().astype(arr.dtype, copy=False)
    out = x if brightness == 1.0 else x * brightness
    if brightness > 1.0:
        out = out.clamp(max=1.0)
    if sigma <= 0:
        return out
    squeeze = out.ndim == 3
    t = (out[None] if squeeze else out).permute(0, 3, 1, 2)
    k = torch.as_tensor(gaussian_kernel1d(sigma), dtype=t.dtype, device=t.device)
    r = (k.numel() - 1) // 2
    c = t.shape[1]
    t = F.pad(t, (r, r, r, r), mode="replicate")
    t = F.conv2d(t, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    t = F.conv2d(t, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    t = t.permute(0, 2, 3, 1)
    return t[0] if squeeze else t


def degrade(x, dp: DegradeParams, rng: np.random.Generator):
    b, s = sample_degradation(dp, rng)
    return apply_degradation(x, b, s)


# ---------------------------------------------------------------------------
# position augmentation


def _affine(h, w, tx, ty, scale) -> np.ndarray:
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    return np.array([[scale, 0.0, (1.0 - scale) * cx + tx],
                     [0.0, scale, (1.0 - scale) * cy + ty]])


def augment_image(x, quad: AnchorQuad, tx: float, ty: float, scale: float):
    """Translate by (tx, ty) px and scale about the image centre; the quad follows exactly.

    Regions uncovered by the transform replicate the nearest edge pixel.
    """
    x = np.asarray(x)
    h, w = x.shape[:2]
    a = _affine(h, w, tx, ty, scale)
    pts = quad.array
    new_pts = pts @ a[:, :2].T + a[:, 2]
    try:
        new_quad = AnchorQuad(tuple(map(tuple, new_pts)))
    except Exception as exc:
        raise AugmentationError(f"augmented quad is invalid: {exc}") from exc
    if not new_quad.inside(h, w):
        raise AugmentationError("augmentation pushes the anchor quad outside the frame")
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip((uu - a[0, 2]) / scale, 0, w - 1)
    sy = np.clip((vv - a[1, 2]) / scale, 0, h - 1)
    x0 = np.clip(np.floor(sx), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (sx - x0)[..., None]
    wy = (sy - y0)[..., None]
    out = ((1 - wy) * ((1 - wx) * x[y0, x0] + wx * x[y0, x1])
           + wy * ((1 - wx) * x[y1, x0] + wx * x[y1, x1]))
    return out.astype(x.dtype, copy=False), new_quad


def synth_augment(x, quad: AnchorQuad, rng: np.random.Generator, max_shift=0.1,
                  scale_range=(0.9, 1.1), max_tries=10):
    """Random shift (at most ``max_shift`` of each side) and rescale; resamples up to ``max_tries``."""
    h, w = np.asarray(x).shape[:2]
    for _ in range(max_tries):
        tx = rng.uniform(-max_shift * w, max_shift * w)
        ty = rng.uniform(-max_shift * h, max_shift * h)
        s = rng.uniform(*scale_range)
        try:
            return augment_image(x, quad, tx, ty, s)
        except AugmentationError:
            continue
    raise AugmentationError(f"no valid augmentation found in {max_tries} tries")


# ---------------------------------------------------------------------------
# toy dataset

SHIRT_COLORS = [
    (0.80, 0.15, 0.15), (0.15, 0.55, 0.20), (0.15, 0.25, 0.75), (0.90, 0.80, 0.20),
    (0.55, 0.20, 0.60), (0.95, 0.55, 0.15), (0.15, 0.65, 0.70), (0.92, 0.92, 0.90),
    (0.20, 0.20, 0.22), (0.85, 0.45, 0.60), (0.50, 0.35, 0.20), (0.60, 0.75, 0.30),
]
PANTS_COLORS = [
    (0.12, 0.14, 0.30), (0.20, 0.20, 0.20), (0.55, 0.50, 0.40), (0.35, 0.45, 0.60),
    (0.40, 0.25, 0.15), (0.70, 0.70, 0.68),
]
SHIRT_STYLES = ("plain", "stripes", "split", "band")
SKIN_TONES = [(0.93, 0.78, 0.65), (0.75, 0.56, 0.42), (0.50, 0.35, 0.25)]
HAIR_COLORS = [(0.10, 0.08, 0.06), (0.45, 0.30, 0.15), (0.80, 0.70, 0.45)]


@dataclass(frozen=True)
class CameraStyle:
    gain: tuple
    contrast: float
    offset: float
    background: tuple
    perspective: float
    blur: float = 0.5


DEFAULT_CAMERA_STYLES = (
    CameraStyle((1.12, 1.00, 0.82), 1.00, 0.00, (0.58, 0.56, 0.50), 0.00),
    CameraStyle((0.84, 0.95, 1.16), 0.80, 0.06, (0.34, 0.40, 0.46), 0.14),
    CameraStyle((0.90, 1.12, 0.88), 1.25, -0.08, (0.40, 0.50, 0.32), -0.14),
    CameraStyle((1.00, 1.06, 0.92), 0.90, 0.03, (0.62, 0.50, 0.44), 0.07),
    CameraStyle((1.06, 0.90, 1.04), 1.10, -0.02, (0.50, 0.46, 0.56), -0.07),
)


@dataclass
class ToyDatasetConfig:
    identity_count: int = 20
    camera_count: int = 3
    images_per_identity_per_camera: int = 30
    image_height: int = 128
    image_width: int = 64
    train_fraction: float = 2.0 / 3.0
    pattern_width_fraction: float = 1.0
    pattern_height_fraction: float = 1.0
    camera_styles: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("identity_count", "camera_count", "images_per_identity_per_camera"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.camera_count < 2:
            raise ConfigError("camera_count must be at least 2 for cross-camera matching")
        if self.image_height < 32 or self.image_width < 16:
            raise ConfigError("toy images must be at least 32x16")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if not (0 < self.pattern_width_fraction <= 1 and 0 < self.pattern_height_fraction <= 1):
            raise ConfigError("pattern fractions must lie in (0, 1]")
        styles = self.styles()
        if len(set(styles)) != len(styles):
            raise ConfigError("camera styles must be pairwise distinct")

    def styles(self) -> tuple:
        if self.camera_styles is not None:
            styles = tuple(self.camera_styles)
            if len(styles) != self.camera_count:
                raise ConfigError("camera_styles length must equal camera_count")
            return styles
        styles = list(DEFAULT_CAMERA_STYLES[: self.camera_count])
        rng = np.random.default_rng(10_000 + self.seed)
        while len(styles) < self.camera_count:
            styles.append(CameraStyle(
                tuple(float(v) for v in rng.uniform(0.82, 1.18, 3)),
                float(rng.uniform(0.75, 1.25)), float(rng.uniform(-0.06, 0.06)),
                tuple(float(v) for v in rng.uniform(0.3, 0.65, 3)), float(rng.uniform(-0.15, 0.15)),
            ))
        return tuple(styles)


@dataclass(frozen=True)
class IdentityLook:
    shirt: int
    style: int
    secondary: int
    torso_width: float
    torso_length: float


def _look_combos() -> list:
    combos = []
    for shirt, style in itertools.product(range(len(SHIRT_COLORS)), range(len(SHIRT_STYLES))):
        if SHIRT_STYLES[style] == "plain":
            combos.append((shirt, style, shirt))
        else:
            combos += [(shirt, style, sec) for sec in range(len(SHIRT_COLORS)) if sec != shirt]
    return combos


def max_distinct_identities() -> int:
    return len(_look_combos())


def _identity_looks(n, rng) -> list:
    # identity lives in the shirt; pants, skin and hair are redrawn per image
    if n > max_distinct_identities():
        raise ConfigError(f"identity_count {n} exceeds the {max_distinct_identities()} distinguishable looks")
    combos = _look_combos()
    order = rng.permutation(len(combos))
    chosen = []
    # prefer looks differing from every accepted one in at least two attributes
    for need in (2, 1):
        for i in order:
            c = combos[i]
            if c in chosen:
                continue
            if all(sum(a != b for a, b in zip(c, o)) >= need for o in chosen):
                chosen.append(c)
            if len(chosen) == n:
                break
        if len(chosen) == n:
            break
    return [IdentityLook(shirt, style, secondary, float(rng.uniform(0.85, 1.15)), float(rng.uniform(0.9, 1.1)))
            for shirt, style, secondary in chosen]


def _convex_fill(uu, vv, corners) -> np.ndarray:
    pts = np.asarray(corners, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    orient = np.sign(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) or 1.0
    inside = np.ones(uu.shape, dtype=bool)
    for (ax, ay), (bx, by) in zip(pts, np.roll(pts, -1, axis=0)):
        inside &= orient * ((bx - ax) * (vv - ay) - (by - ay) * (uu - ax)) >= 0
    return inside


def _render_person(look: IdentityLook, style: CameraStyle, h, w, rng, cfg: ToyDatasetConfig):
    """Render one image; returns (H x W x 3 float32, AnchorQuad of the chest region)."""
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    bg = np.asarray(style.background)
    img[:] = bg + rng.normal(0, 0.02, 3)
    # background clutter
    for _ in range(int(rng.integers(2, 5))):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        bw, bh = rng.uniform(0.1 * w, 0.5 * w), rng.uniform(0.05 * h, 0.25 * h)
        region = (uu >= x0) & (uu < x0 + bw) & (vv >= y0) & (vv < y0 + bh)
        img[region] = np.clip(bg + rng.normal(0, 0.08, 3), 0, 1)

    scale = rng.uniform(0.92, 1.04) * h / 128.0
    cx = (w - 1) / 2.0 + rng.uniform(-0.05, 0.05) * w
    top = 0.06 * h + rng.uniform(-0.02, 0.02) * h
    sx = scale * w / 64.0 / (h / 128.0)

    head_r = 9.0 * scale
    head_cy = top + head_r
    torso_top = head_cy + head_r + 1.0 * scale
    torso_len = 40.0 * scale * look.torso_length
    torso_half = 12.0 * sx * look.torso_width
    persp = style.perspective
    # viewpoint: one side of the body appears shorter
    tl = (cx - torso_half * (1 - persp / 2), torso_top + persp * 3 * scale)
    tr = (cx + torso_half * (1 + persp / 2), torso_top - persp * 3 * scale)
    br = (cx + torso_half * 0.88 * (1 + persp / 2), torso_top + torso_len - persp * 3 * scale)
    bl = (cx - torso_half * 0.88 * (1 - persp / 2), torso_top + torso_len + persp * 3 * scale)
    torso = [tl, tr, br, bl]

    shirt = np.asarray(SHIRT_COLORS[look.shirt])
    second = np.asarray(SHIRT_COLORS[look.secondary])
    pants = np.asarray(PANTS_COLORS[rng.integers(len(PANTS_COLORS))])
    skin = np.asarray(SKIN_TONES[rng.integers(len(SKIN_TONES))])
    hair = np.asarray(HAIR_COLORS[rng.integers(len(HAIR_COLORS))])

    # legs
    leg_top = torso_top + torso_len - 2 * scale
    leg_len = min(h - 2 - leg_top, 48.0 * scale)
    spread = rng.uniform(0.0, 4.0) * scale
    leg_w = 5.5 * sx
    for side in (-1, 1):
        lx = cx + side * (4.5 * sx)
        foot_x = lx + side * spread
        leg = [(lx - leg_w, leg_top), (lx + leg_w, leg_top), (foot_x + leg_w * 0.8, leg_top + leg_len),
               (foot_x - leg_w * 0.8, leg_top + leg_len)]
        img[_convex_fill(uu, vv, leg)] = pants
        shoe = (np.abs(uu - foot_x) <= leg_w) & (vv >= leg_top + leg_len - 3 * scale) & (vv <= leg_top + leg_len + 1)
        img[shoe] = (0.1, 0.1, 0.1)
    # arms
    swing = rng.uniform(-3.0, 3.0) * scale
    for side, corner in ((-1, tl), (1, tr)):
        ax = corner[0] + side * 2.5 * sx
        arm = [(ax - 3 * sx, corner[1] + 2), (ax + 3 * sx, corner[1] + 2),
               (ax + 3 * sx + side * swing, corner[1] + 34 * scale), (ax - 3 * sx + side * swing, corner[1] + 34 * scale)]
        img[_convex_fill(uu, vv, arm)] = skin
        hand = ((uu - (ax + side * swing)) ** 2 + (vv - (corner[1] + 36 * scale)) ** 2) <= (3 * scale) ** 2
        img[hand] = skin

    # torso with the shirt style expressed in torso-local coordinates
    inside = _convex_fill(uu, vv, torso)
    hmg = estimate_homography(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float), np.array(torso))
    inv = np.linalg.inv(hmg.matrix)
    loc = np.stack([uu, vv, np.ones_like(uu)], -1) @ inv.T
    lu, lv = loc[..., 0] / loc[..., 2], loc[..., 1] / loc[..., 2]
    style_name = SHIRT_STYLES[look.style]
    if style_name == "plain":
        use_second = np.zeros_like(inside)
    elif style_name == "stripes":
        use_second = (np.floor(lv * 6) % 2) == 1
    elif style_name == "split":
        use_second = lu >= 0.5
    else:
        use_second = (lv >= 0.62) & (lv <= 0.8)
    img[inside & ~use_second] = shirt
    img[inside & use_second] = second

    # head and hair
    head = ((uu - cx) / (head_r * 0.85 * sx / scale)) ** 2 + ((vv - head_cy) / head_r) ** 2 <= 1.0
    img[head] = skin
    img[head & (vv < head_cy - 0.35 * head_r)] = hair

    # per-image lighting and sensor noise
    img = img * rng.uniform(0.94, 1.06)
    img = img + rng.normal(0, 0.015, img.shape)

    # camera look
    img = img * np.asarray(style.gain)
    img = (img - 0.5) * style.contrast + 0.5 + style.offset
    img = np.clip(img, 0.0, 1.0)
    if style.blur > 0:
        img = apply_degradation(img, 1.0, style.blur)

    # torso-front region for the pattern, bilinear in torso corners
    fw, fh = cfg.pattern_width_fraction, cfg.pattern_height_fraction
    u0, u1 = 0.5 - fw / 2, 0.5 + fw / 2
    v0, v1 = 0.5 - fh / 2, 0.5 + fh / 2

    def at(u, v):
        p = hmg.apply([[u, v]])[0]
        return float(np.clip(p[0], 0, w - 1)), float(np.clip(p[1], 0, h - 1))

    quad = AnchorQuad((at(u0, v0), at(u1, v0), at(u1, v1), at(u0, v1)))
    return img.astype(np.float32), quad


def generate_toy_dataset(cfg: ToyDatasetConfig) -> ReIDDataset:
    """Render ``identity_count x camera_count x images_per_identity_per_camera`` labelled images.

    Identities and cameras are numbered from 1. Within each (identity, camera)
    group the first ``round(n * train_fraction)`` images go to split ``train``
    and the rest to ``test``. Fully determined by ``cfg.seed``.
    """
    root = np.random.SeedSequence(cfg.seed)
    look_rng = np.random.default_rng(root.spawn(1)[0])
    looks = _identity_looks(cfg.identity_count, look_rng)
    styles = cfg.styles()
    n = cfg.images_per_identity_per_camera
    n_train = int(round(n * cfg.train_fraction))
    group_seeds = root.spawn(1 + cfg.identity_count * cfg.camera_count)[1:]
    samples = []
    for i, look in enumerate(looks):
        for c, style in enumerate(styles):
            rng = np.random.default_rng(group_seeds[i * cfg.camera_count + c])
            for k in range(n):
                img, quad = _render_person(look, style, cfg.image_height, cfg.image_width, rng, cfg)
                split = "train" if k < n_train else "test"
                samples.append(Sample(img, i + 1, c + 1, k + 1, split, quad))
    return ReIDDataset(samples)
