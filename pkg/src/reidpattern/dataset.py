"""Labelled image collections and the Market1501-style directory layout.

Files are named ``PPPP_cC_NNNN.png`` (identity, camera, sequence) and live under
``<root>/<split>/``. Each image may carry an anchor-quad sidecar ``<stem>.quad``.
"""
from __future__ import annotations

import hashlib
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError
from .geometry import AnchorQuad, read_quad, write_quad
from .imagecore import load_png, save_png

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
QUAD_SUFFIX = ".quad"
SIDECAR_SUFFIXES = (QUAD_SUFFIX, ".json")
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)(?:s\d+)?_(\d+)?")


@dataclass
class Sample:
    image: np.ndarray
    identity: int
    camera: int
    sequence: int = 0
    split: str = "train"
    quad: AnchorQuad | None = None
    name: str | None = None

    def __post_init__(self):
        if self.name is None:
            self.name = market_name(self.identity, self.camera, self.sequence)


def market_name(identity, camera, sequence, suffix=".png") -> str:
    return f"{identity:04d}_c{camera}_{sequence:04d}{suffix}"


def parse_name(filename):
    """Return ``(identity, camera, sequence)`` for a Market1501-style filename, or None."""
    path = Path(filename)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        return None
    m = _NAME_RE.match(path.stem)
    if m is None:
        return None
    seq = int(m.group(3)) if m.group(3) is not None else 0
    return int(m.group(1)), int(m.group(2)), seq


def default_torso_quad(height, width) -> AnchorQuad:
    """Centred chest region used when an image has no quad annotation."""
    return AnchorQuad.from_rect(0.3 * (width - 1), 0.3 * (height - 1), 0.7 * (width - 1), 0.5 * (height - 1))


@dataclass
class ReIDDataset:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def split(self, name) -> "ReIDDataset":
        return ReIDDataset([s for s in self.samples if s.split == name])

    def select(self, identity=None, camera=None) -> list:
        return [s for s in self.samples
                if (identity is None or s.identity == identity) and (camera is None or s.camera == camera)]

    @property
    def identities(self) -> list:
        return sorted({s.identity for s in self.samples})

    @property
    def cameras(self) -> list:
        return sorted({s.camera for s in self.samples})

    @property
    def splits(self) -> list:
        return sorted({s.split for s in self.samples})

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in sorted(self.samples, key=lambda s: (s.split, s.name)):
            h.update(f"{s.split}/{s.name}:{s.identity}:{s.camera}:".encode())
            h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
            if s.quad is not None:
                h.update(s.quad.to_line().encode())
        return h.hexdigest()


def write_dataset(dataset: ReIDDataset, root) -> None:
    root = Path(root)
    for s in dataset:
        d = root / s.split
        d.mkdir(parents=True, exist_ok=True)
        save_png(d / s.name, s.image)
        if s.quad is not None:
            write_quad(d / (Path(s.name).stem + QUAD_SUFFIX), s.quad)


def ingest_dataset(path) -> ReIDDataset:
    """Load a Market1501-style folder.

    Split names come from first-level subdirectories; images directly under
    ``path`` get split ``"all"``. Files whose names do not parse are skipped with
    a warning. Images without a quad sidecar get :func:`default_torso_quad`.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"dataset directory {root} does not exist")
    candidates = []
    for p in sorted(root.iterdir()):
        if p.is_dir():
            candidates += [(p.name, f) for f in sorted(p.iterdir()) if f.is_file()]
        elif p.is_file():
            candidates.append(("all", p))
    samples = []
    for split, f in candidates:
        if f.suffix.lower() in SIDECAR_SUFFIXES:
            continue
        parsed = parse_name(f.name)
        if parsed is None:
            msg = f"skipping unparseable file {f}"
            logger.warning(msg)
            warnings.warn(msg, stacklevel=2)
            continue
        identity, camera, seq = parsed
        image = load_png(f)
        quad_path = f.with_suffix(QUAD_SUFFIX)
        if quad_path.exists():
            quad = read_quad(quad_path)
        else:
            quad = default_torso_quad(*image.shape[:2])
        samples.append(Sample(image, identity, camera, seq, split, quad, f.name))
    if not samples:
        raise IngestionError(f"no parseable image files under {root}")
    return ReIDDataset(samples)
