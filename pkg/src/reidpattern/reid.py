"""Small convolutional re-ID embedding models.

Two training recipes share one encoder:

* ``siamese_verification``: identity classification plus a same/different
  verification head on squared embedding differences.
* ``classification_embedding``: identity classification only; the classifier is
  dropped at inference.

At inference both expose unit-norm embeddings and the pairwise score
``(1 + cos(e_a, e_b)) / 2`` in [0, 1].
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateEmbeddingError, InvalidArgumentError, TrainingError

logger = logging.getLogger(__name__)

VARIANTS = ("siamese_verification", "classification_embedding")
CHECKPOINT_FORMAT = "reidpattern-checkpoint"
CHECKPOINT_VERSION = 1
_NORM_EPS = 1e-12


class EmbeddingNet(nn.Module):
    def __init__(self, embedding_dim=64, width=16, num_classes=0, verification=False, cls_scale=10.0):
        super().__init__()
        w = width

        def block(cin, cout, k, stride):
            return [nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
                    nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]

        self.encoder = nn.Sequential(
            *block(3, w, 5, 2),
            *block(w, 2 * w, 3, 2),
            *block(2 * w, 4 * w, 3, 2),
            *block(4 * w, 4 * w, 3, 1),
        )
        self.project = nn.Linear(4 * w, embedding_dim)
        self.cls_scale = cls_scale
        self.classifier = nn.Linear(embedding_dim, num_classes, bias=False) if num_classes else None
        self.verifier = nn.Linear(embedding_dim, 2) if verification else None

    def forward(self, x):
        """Raw (unnormalized) features for an N x 3 x H x W batch."""
        f = self.encoder(x)
        return self.project(f.mean(dim=(2, 3)))

    def logits(self, e_unit):
        w = F.normalize(self.classifier.weight, dim=1)
        return self.cls_scale * e_unit @ w.t()


@dataclass
class TrainConfig:
    epochs: int = 25
    ids_per_batch: int = 16
    images_per_id: int = 4
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    identification_weight: float = 1.0
    verification_weight: float = 1.0
    embedding_dim: int = 64
    width: int = 16
    input_height: int | None = None
    input_width: int | None = None
    hflip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.ids_per_batch < 2 or self.images_per_id < 2:
            raise ConfigError("epochs must be >= 1, ids_per_batch and images_per_id >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class ReIDModel:
    net: EmbeddingNet
    variant: str
    input_size: tuple
    embedding_dim: int
    arch: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    @property
    def dtype(self):
        return self.net.project.weight.dtype

    def to(self, dtype) -> "ReIDModel":
        """Copy of the model with parameters cast to ``dtype`` (e.g. float64 for gradient checks)."""
        return ReIDModel(copy.deepcopy(self.net).to(dtype), self.variant, self.input_size,
                         self.embedding_dim, dict(self.arch), dict(self.metadata))

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        """N x H x W x 3 in [0, 1] -> N x 3 x h x w at model input size (bilinear resize)."""
        if x.ndim != 4 or x.shape[-1] != 3:
            raise InvalidArgumentError(f"expected N x H x W x 3 images, got {tuple(x.shape)}")
        t = x.to(self.dtype).permute(0, 3, 1, 2)
        if tuple(t.shape[2:]) != tuple(self.input_size):
            t = F.interpolate(t, size=tuple(self.input_size), mode="bilinear", align_corners=False)
        return t

    def embed_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable unit-norm embeddings for an N x H x W x 3 batch."""
        f = self.net(self.preprocess(x))
        norm = f.norm(dim=1, keepdim=True)
        if bool((norm <= _NORM_EPS).any()):
            raise DegenerateEmbeddingError("model produced a zero feature vector; embedding is undefined")
        return f / norm


def similarity_tensor(ea: torch.Tensor, eb: torch.Tensor) -> torch.Tensor:
    """(1 + cos) / 2 for unit-norm embeddings (broadcast over leading dims)."""
    return 0.5 * (1.0 + (ea * eb).sum(dim=-1))


def _as_batch(images, dtype=torch.float32) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        t = images
    else:
        t = torch.from_numpy(np.ascontiguousarray(np.asarray(images)))
    if t.ndim == 3:
        t = t[None]
    return t.to(dtype)


def _check_input(m: ReIDModel, x) -> None:
    arr = np.asarray(x)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"image must be H x W x 3, got {arr.shape}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise InvalidArgumentError("image must be at least 8x8")


def embed(m: ReIDModel, x) -> np.ndarray:
    """Unit-norm embedding (float64) of a single H x W x 3 image."""
    _check_input(m, x)
    with torch.no_grad():
        e = m.embed_tensor(_as_batch(x, m.dtype))[0].double().numpy()
    return e / np.linalg.norm(e)


def embed_batch(m: ReIDModel, images, batch_size=256) -> np.ndarray:
    """Unit-norm embeddings (N x D, float64) for a sequence of images."""
    images = list(images) if not isinstance(images, np.ndarray) else images
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = np.stack([np.asarray(a) for a in images[i:i + batch_size]])
            out.append(m.embed_tensor(_as_batch(chunk, m.dtype)).double().numpy())
    e = np.concatenate(out) if out else np.zeros((0, m.embedding_dim))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def score_from_embeddings(ea: np.ndarray, eb: np.ndarray):
    """Similarity score(s) from unit-norm embeddings, clipped to [0, 1] against round-off."""
    s = 0.5 * (1.0 + np.sum(ea * eb, axis=-1))
    if np.any(s < -1e-6) or np.any(s > 1 + 1e-6):
        raise DegenerateEmbeddingError(f"similarity {s} outside [0, 1]; embeddings are not unit-norm")
    return np.clip(s, 0.0, 1.0)


def similarity(m: ReIDModel, a, b) -> float:
    """Score in [0, 1]; symmetric because each image is embedded on its own."""
    return float(score_from_embeddings(embed(m, a), embed(m, b)))


def similarity_gradient(m: ReIDModel, a, b, wrt="a") -> np.ndarray:
    """Gradient of ``similarity(m, a, b)`` with respect to the pixels of ``a`` or ``b``."""
    if wrt not in ("a", "b"):
        raise InvalidArgumentError("wrt must be 'a' or 'b'")
    _check_input(m, a)
    _check_input(m, b)
    ta = _as_batch(a, m.dtype).requires_grad_(wrt == "a")
    tb = _as_batch(b, m.dtype).requires_grad_(wrt == "b")
    s = similarity_tensor(m.embed_tensor(ta), m.embed_tensor(tb)).sum()
    (g,) = torch.autograd.grad(s, ta if wrt == "a" else tb)
    return g[0].double().numpy()


# ---------------------------------------------------------------------------
# training


def _pk_batches(labels: np.ndarray, p: int, k: int, rng: np.random.Generator):
    """Yield index batches of p identities x k images, covering each identity roughly once per epoch."""
    classes = np.unique(labels)
    by_class = {c: np.flatnonzero(labels == c) for c in classes}
    n_batches = max(1, int(math.ceil(len(labels) / (p * k))))
    for _ in range(n_batches):
        chosen = rng.choice(classes, size=min(p, len(classes)), replace=False)
        idx = []
        for c in chosen:
            pool = by_class[c]
            idx.extend(rng.choice(pool, size=k, replace=len(pool) < k))
        yield np.asarray(idx)


def train_model(dataset, variant: str, tc: TrainConfig, eval_split="test") -> ReIDModel:
    """Train an embedding model on the ``train`` split (or every sample if there is none).

    The held-out cross-camera rank-1 on ``eval_split`` is recorded in
    ``model.metadata["heldout_rank1"]`` when that split exists.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown model variant {variant!r}")
    train = dataset.split("train") if "train" in dataset.splits else dataset
    if len(train.identities) < 2 or len(train.cameras) < 2:
        raise ConfigError("training needs at least 2 identities and 2 cameras")
    samples = list(train)
    ids = train.identities
    label_of = {pid: i for i, pid in enumerate(ids)}
    labels = np.array([label_of[s.identity] for s in samples])
    h, w = samples[0].image.shape[:2]
    in_h = tc.input_height or h
    in_w = tc.input_width or w

    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    net = EmbeddingNet(tc.embedding_dim, tc.width, num_classes=len(ids),
                       verification=variant == "siamese_verification")
    images = torch.from_numpy(np.stack([np.asarray(s.image, dtype=np.float32) for s in samples]))
    images = images.permute(0, 3, 1, 2).contiguous()
    if (in_h, in_w) != (h, w):
        images = F.interpolate(images, size=(in_h, in_w), mode="bilinear", align_corners=False)
    targets = torch.from_numpy(labels)

    opt = torch.optim.Adam(net.parameters(), lr=tc.learning_rate, weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=tc.epochs)
    net.train()
    for epoch in range(tc.epochs):
        total, count = 0.0, 0
        for idx in _pk_batches(labels, tc.ids_per_batch, tc.images_per_id, rng):
            x = images[idx]
            if tc.hflip:
                flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
                x = torch.where(flip[:, None, None, None], x.flip(3), x)
            y = targets[idx]
            e = F.normalize(net(x), dim=1)
            loss = tc.identification_weight * F.cross_entropy(net.logits(e), y)
            if net.verifier is not None:
                # pair every sample with a shuffled partner; PK batches guarantee positives exist
                perm = torch.from_numpy(rng.permutation(len(idx)))
                same_block = torch.arange(len(idx)) // tc.images_per_id
                partner = torch.where(torch.from_numpy(rng.random(len(idx)) < 0.5),
                                      same_block * tc.images_per_id + (torch.arange(len(idx)) + 1) % tc.images_per_id,
                                      perm)
                same = (y == y[partner]).long()
                v = net.verifier((e - e[partner]) ** 2)
                loss = loss + tc.verification_weight * F.cross_entropy(v, same)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        sched.step()
        logger.info("epoch %d/%d loss %.4f", epoch + 1, tc.epochs, total / max(count, 1))

    arch = {"embedding_dim": tc.embedding_dim, "width": tc.width, "num_classes": len(ids),
            "verification": variant == "siamese_verification"}
    model = ReIDModel(net, variant, (in_h, in_w), tc.embedding_dim, arch,
                      {"train_config": asdict(tc), "train_seed": tc.seed,
                       "dataset_fingerprint": dataset.fingerprint(), "resize": "bilinear",
                       "identities": [int(i) for i in ids], "final_loss": total / max(count, 1)})
    if eval_split in dataset.splits:
        from .evalbench import evaluate_retrieval

        stats = evaluate_retrieval(model, dataset.split(eval_split))
        model.metadata["heldout_rank1"] = stats["rank1"]
        model.metadata["heldout_map"] = stats["mAP"]
        logger.info("held-out rank-1 %.3f mAP %.3f", stats["rank1"], stats["mAP"])
    return model


# ---------------------------------------------------------------------------
# persistence


def save_model(m: ReIDModel, path) -> None:
    """Single-file checkpoint plus ``<path>.manifest.json`` (seed, dataset fingerprint)."""
    path = Path(path)
    state = {k: v.detach().cpu() for k, v in m.net.state_dict().items()}
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": m.variant,
        "arch": m.arch,
        "input_size": list(m.input_size),
        "embedding_dim": m.embedding_dim,
        "state_dict": state,
        "metadata": m.metadata,
    }, path)
    manifest = {
        "variant": m.variant,
        "train_seed": m.metadata.get("train_seed"),
        "dataset_fingerprint": m.metadata.get("dataset_fingerprint"),
        "heldout_rank1": m.metadata.get("heldout_rank1"),
    }
    path.with_suffix(path.suffix + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model(path) -> ReIDModel:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise InvalidArgumentError(f"{path} is not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {blob.get('version')}")
    a = blob["arch"]
    net = EmbeddingNet(a["embedding_dim"], a["width"], a["num_classes"], a["verification"])
    net.load_state_dict(blob["state_dict"])
    return ReIDModel(net, blob["variant"], tuple(blob["input_size"]), blob["embedding_dim"], a, blob["metadata"])
