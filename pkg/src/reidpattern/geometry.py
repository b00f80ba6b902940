"""Planar placement of the pattern on a person image.

A pattern raster is mapped into an image through a homography estimated from the
pattern rectangle to the image's anchor quad. Warping uses inverse mapping with
bilinear interpolation; since the sampling positions depend only on the
homography, they are precomputed once in a :class:`WarpPlan` and applied to
either numpy arrays or torch tensors. For a fixed plan the warped raster is a
linear function of the pattern.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import GeometryError, InvalidArgumentError
from .imagecore import Mask, Pattern

_SNAP = 1e-9
MIN_QUAD_AREA = 4.0


def _polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _is_convex(pts: np.ndarray) -> bool:
    crosses = []
    for i in range(4):
        a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        crosses.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    crosses = np.asarray(crosses)
    return bool(np.all(crosses > 0) or np.all(crosses < 0))


@dataclass(frozen=True)
class AnchorQuad:
    """Four (x, y) pixel corners: top-left, top-right, bottom-right, bottom-left."""

    points: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (4, 2) or not np.all(np.isfinite(pts)):
            raise GeometryError(f"anchor quad needs 4 finite (x, y) points, got shape {pts.shape}")
        if not _is_convex(pts):
            raise GeometryError("anchor quad must be convex")
        if abs(_polygon_area(pts)) < MIN_QUAD_AREA:
            raise GeometryError(f"anchor quad area below {MIN_QUAD_AREA} px^2")
        object.__setattr__(self, "points", tuple(tuple(float(v) for v in p) for p in pts))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64)

    @property
    def area(self) -> float:
        return abs(_polygon_area(self.array))

    def inside(self, height, width) -> bool:
        pts = self.array
        return bool(np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= width - 1)
                    and np.all(pts[:, 1] >= 0) and np.all(pts[:, 1] <= height - 1))

    def check_inside(self, height, width) -> "AnchorQuad":
        if not self.inside(height, width):
            raise GeometryError(f"anchor quad {self.points} leaves the {height}x{width} image")
        return self

    @classmethod
    def from_rect(cls, x0, y0, x1, y1) -> "AnchorQuad":
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    def to_line(self) -> str:
        return ",".join(repr(float(v)) for p in self.points for v in p)

    @classmethod
    def from_line(cls, line: str) -> "AnchorQuad":
        parts = [p for p in line.strip().split(",") if p.strip()]
        if len(parts) != 8:
            raise GeometryError(f"quad annotation needs 8 comma-separated values, got {len(parts)}")
        vals = [float(p) for p in parts]
        return cls(tuple(zip(vals[0::2], vals[1::2])))


def write_quad(path, quad: AnchorQuad) -> None:
    Path(path).write_text(quad.to_line() + "\n")


def read_quad(path) -> AnchorQuad:
    return AnchorQuad.from_line(Path(path).read_text())


def pattern_rect(height, width) -> np.ndarray:
    """Corners of a pattern raster in pixel-centre coordinates, in anchor-quad order."""
    return np.array([[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]])


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise GeometryError(f"homography must be a finite 3x3 matrix, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-12 or abs(m[2, 2]) <= 1e-12:
            raise GeometryError("homography is singular")
        object.__setattr__(self, "matrix", m / m[2, 2])

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        hom = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        return hom[:, :2] / hom[:, 2:3]


def _corner_array(q) -> np.ndarray:
    pts = q.array if isinstance(q, AnchorQuad) else np.asarray(q, dtype=np.float64)
    if pts.shape != (4, 2):
        raise GeometryError(f"expected 4 corner points, got shape {pts.shape}")
    # no three corners may be collinear
    for i in range(4):
        a, b, c = pts[i], pts[(i + 1) % 4], pts[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        scale = max(np.abs(b - a).max(), np.abs(c - a).max(), 1.0)
        if abs(cross) <= 1e-12 * scale * scale:
            raise GeometryError("degenerate quad: three corners are collinear")
    return pts


def estimate_homography(src, dst) -> Homography:
    """Solve the 8-unknown linear system (h33 = 1) mapping 4 src corners to 4 dst corners."""
    s = _corner_array(src)
    d = _corner_array(dst)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise GeometryError(f"homography system is singular: {exc}") from exc
    if not np.all(np.isfinite(h)):
        raise GeometryError("homography system produced non-finite values")
    return Homography(np.append(h, 1.0).reshape(3, 3))


class WarpPlan:
    """Precomputed bilinear inverse-warp from a (src_h, src_w) raster to (out_h, out_w)."""

    def __init__(self, homography: Homography, src_h, src_w, out_h, out_w):
        if out_h <= 0 or out_w <= 0:
            raise InvalidArgumentError("output size must be positive")
        self.src_shape = (int(src_h), int(src_w))
        self.out_shape = (int(out_h), int(out_w))
        try:
            inv = np.linalg.inv(homography.matrix)
        except np.linalg.LinAlgError as exc:
            raise GeometryError(f"homography is not invertible: {exc}") from exc
        vv, uu = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
        hom = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ inv.T
        w = hom[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            x = hom[..., 0] / w
            y = hom[..., 1] / w
        # snap coordinates that are integral up to round-off, so exact placements stay exact
        rx, ry = np.round(x), np.round(y)
        x = np.where(np.abs(x - rx) < _SNAP, rx, x)
        y = np.where(np.abs(y - ry) < _SNAP, ry, y)
        valid = (np.isfinite(x) & np.isfinite(y) & (np.abs(w) > 1e-12)
                 & (x >= 0) & (x <= src_w - 1) & (y >= 0) & (y <= src_h - 1))
        x = np.where(valid, x, 0.0)
        y = np.where(valid, y, 0.0)
        x0 = np.clip(np.floor(x), 0, max(src_w - 2, 0)).astype(np.int64)
        y0 = np.clip(np.floor(y), 0, max(src_h - 2, 0)).astype(np.int64)
        self.x0, self.y0 = x0, y0
        self.x1 = np.minimum(x0 + 1, src_w - 1)
        self.y1 = np.minimum(y0 + 1, src_h - 1)
        self.wx = x - x0
        self.wy = y - y0
        self.valid = valid
        self._torch_cache = {}

    def _arrays(self, like):
        if isinstance(like, torch.Tensor):
            key = (like.dtype, like.device)
            if key not in self._torch_cache:
                idx = tuple(torch.as_tensor(a, device=like.device) for a in (self.y0, self.x0, self.y1, self.x1))
                w = tuple(torch.as_tensor(a, dtype=like.dtype, device=like.device) for a in (self.wx, self.wy))
                self._torch_cache[key] = idx + w
            return self._torch_cache[key]
        return self.y0, self.x0, self.y1, self.x1, self.wx, self.wy

    def sample(self, src):
        """Bilinearly sample ``src`` (H x W or H x W x C, numpy or torch) at the plan positions.

        Positions outside the source are not masked here; see :attr:`valid`.
        """
        y0, x0, y1, x1, wx, wy = self._arrays(src)
        if src.ndim == 3:
            wx, wy = wx[..., None], wy[..., None]
        a = src[y0, x0]
        b = src[y0, x1]
        c = src[y1, x0]
        d = src[y1, x1]
        return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)

    def coverage(self, mask) -> np.ndarray:
        """1 where the bilinearly warped mask is >= 0.5 inside the source bounds, else 0.

        ``mask`` is a :class:`Mask` or a raw 0/1 array (which may be all zero).
        """
        values = _mask_values(mask)
        if values.shape != self.src_shape:
            raise InvalidArgumentError(f"mask shape {values.shape} does not match plan source {self.src_shape}")
        m = self.sample(values)
        return ((m >= 0.5) & self.valid).astype(np.float64)


def _mask_values(mask) -> np.ndarray:
    if isinstance(mask, Mask):
        return mask.values
    values = np.asarray(mask, dtype=np.float64)
    if values.ndim != 2 or not np.all((values == 0) | (values == 1)):
        raise InvalidArgumentError("mask must be a 2-D array of zeros and ones")
    return values


def plan_for_quad(pattern_shape, quad: AnchorQuad, out_h, out_w) -> WarpPlan:
    """Warp plan placing a raster of ``pattern_shape`` onto ``quad`` in an out_h x out_w image."""
    ph, pw = pattern_shape
    h = estimate_homography(pattern_rect(ph, pw), quad)
    return WarpPlan(h, ph, pw, out_h, out_w)


def warp_pattern(p, m, h: Homography, out_h, out_w):
    """Warp the masked pattern into an out_h x out_w raster.

    Returns ``(warped, coverage)``: the warped raster is zero outside coverage.
    """
    pixels = p.pixels if isinstance(p, Pattern) else np.asarray(p, dtype=np.float64)
    plan = WarpPlan(h, pixels.shape[0], pixels.shape[1], out_h, out_w)
    cov = plan.coverage(m)
    warped = plan.sample(pixels * _mask_values(m)[..., None]) * cov[..., None]
    return warped, cov


def overlay(x, warped, coverage):
    """Hard replacement: warped values where coverage is 1, original pixels elsewhere.

    Works on numpy arrays (H x W x 3) and on torch tensors of the same layout.
    """
    if tuple(warped.shape[:2]) != tuple(x.shape[:2]) or tuple(coverage.shape[:2]) != tuple(x.shape[:2]):
        raise InvalidArgumentError(
            f"overlay size mismatch: image {tuple(x.shape[:2])}, warped {tuple(warped.shape[:2])}, "
            f"coverage {tuple(coverage.shape[:2])}"
        )
    if isinstance(x, torch.Tensor) or isinstance(warped, torch.Tensor):
        x_t = torch.as_tensor(x)
        w_t = torch.as_tensor(warped, dtype=x_t.dtype)
        c_t = torch.as_tensor(coverage, device=x_t.device)
        return torch.where(c_t[..., None] >= 0.5, w_t, x_t)
    out = np.where(np.asarray(coverage)[..., None] >= 0.5, warped, x)
    return out.astype(np.asarray(x).dtype, copy=False)
