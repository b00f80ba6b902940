"""Adversarial pattern generation against an embedding re-ID model.

The pattern is placed on every generating-set image through that image's anchor
quad, so a single raster has to work across cameras and positions. Objectives:

* pairwise: sum of cross-camera similarities over the whole set (evade), minus
  a pull towards the target images (impersonate);
* triplet / quadruplet: one sampled (anchor, same-camera positive,
  other-camera negative[, target]) tuple per step;
* robust: the triplet / quadruplet objectives on randomly degraded images, with
  a total-variation penalty, restricted to a printable colour interval.

Every loss function returns ``(value, gradient)`` with the gradient taken with
respect to the pattern pixels (float64 array of the pattern's shape).
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ConfigError, InvalidArgumentError, OptimizationError, SamplingError
from .geometry import AnchorQuad, plan_for_quad
from .imagecore import Mask, Pattern, make_mask, project_interval, total_variation
from .physicsim import DegradeParams, apply_degradation, sample_degradation, synth_augment
from .reid import similarity_tensor

logger = logging.getLogger(__name__)

MODES = ("evade", "impersonate")
STAGES = ("pairwise", "triplet", "robust")


@dataclass(eq=False)
class GSEntry:
    image: np.ndarray
    camera: int
    quad: AnchorQuad
    position: str = ""
    provenance: str = "original"
    identity: int = 0
    _plans: dict = field(default_factory=dict, repr=False)
    _tensors: dict = field(default_factory=dict, repr=False)

    def tensor(self, dtype) -> torch.Tensor:
        if dtype not in self._tensors:
            self._tensors[dtype] = torch.from_numpy(np.ascontiguousarray(self.image)).to(dtype)
        return self._tensors[dtype]

    def plan(self, pattern_shape):
        key = tuple(pattern_shape)
        if key not in self._plans:
            h, w = self.image.shape[:2]
            self._plans[key] = plan_for_quad(key, self.quad, h, w)
        return self._plans[key]


@dataclass
class GeneratingSet:
    entries: list

    def __post_init__(self):
        if not self.entries:
            raise ConfigError("generating set is empty")
        if len({e.identity for e in self.entries}) != 1:
            raise ConfigError("generating set must contain a single identity")
        if len(self.cameras) < 2:
            raise ConfigError("generating set needs images from at least 2 cameras")
        for e in self.entries:
            if not isinstance(e.quad, AnchorQuad):
                raise ConfigError("every generating-set entry needs an anchor quad")
            e.quad.check_inside(*e.image.shape[:2])

    def __len__(self):
        return len(self.entries)

    @property
    def cameras(self) -> list:
        return sorted({e.camera for e in self.entries})

    @property
    def camera_count(self) -> int:
        return len(self.cameras)

    @property
    def identity(self) -> int:
        return self.entries[0].identity


@dataclass
class Triplet:
    anchor: GSEntry
    positive: GSEntry
    negative: GSEntry

    def __post_init__(self):
        if not (self.anchor.camera == self.positive.camera != self.negative.camera):
            raise InvalidArgumentError("triplet needs anchor/positive on one camera and negative on another")
        if len({self.anchor.identity, self.positive.identity, self.negative.identity}) != 1:
            raise InvalidArgumentError("triplet images must share one identity")


@dataclass
class Quadruplet:
    triplet: Triplet
    target: np.ndarray


@dataclass
class AttackConfig:
    mode: str = "evade"
    stage: str = "robust"
    alpha: float = 1.0
    beta: float = 0.5
    lambda1: float = 0.5
    lambda2: float = 1.0
    kappa: float = 1e-3
    rank_k: int = 10
    lower: float = 0.1
    upper: float = 0.85
    pattern_height: int = 16
    pattern_width: int = 16
    mask_kind: str = "full"
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iterations: int = 700
    batch_size: int = 1
    seed: int = 0
    degrade: DegradeParams = field(default_factory=DegradeParams)

    def __post_init__(self):
        if isinstance(self.degrade, dict):
            self.degrade = DegradeParams(**{k: tuple(v) for k, v in self.degrade.items()})
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("alpha", "beta", "lambda1", "lambda2", "kappa"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.rank_k < 1:
            raise ConfigError("rank_k must be positive")
        if not 0 <= self.lower < self.upper <= 1:
            raise ConfigError("pattern interval must satisfy 0 <= lower < upper <= 1")
        if self.pattern_height < 1 or self.pattern_width < 1:
            raise ConfigError("pattern size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("ADAM betas must lie in (0, 1)")
        if self.max_iterations < 0 or self.batch_size < 1:
            raise ConfigError("max_iterations must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degrade"] = {k: list(v) for k, v in d["degrade"].items()}
        return d


# ---------------------------------------------------------------------------
# generating set


def _as_entry(raw, position="") -> GSEntry:
    if isinstance(raw, GSEntry):
        return raw
    return GSEntry(np.asarray(raw.image), int(raw.camera), raw.quad,
                   position or getattr(raw, "name", "") or "", "original", int(raw.identity))


def build_generating_set(raw_entries, n_augment=4, rng=None, max_shift=0.1, scale_range=(0.9, 1.1)) -> GeneratingSet:
    """Originals followed by ``n_augment`` shifted/rescaled copies of each."""
    originals = [_as_entry(r) for r in raw_entries]
    if len({e.camera for e in originals}) < 2:
        raise ConfigError("generating set needs images from at least 2 cameras")
    if len({e.identity for e in originals}) != 1:
        raise ConfigError("generating set must contain a single identity")
    if n_augment < 0:
        raise ConfigError("n_augment must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    entries = list(originals)
    for e in originals:
        for k in range(n_augment):
            img, quad = synth_augment(e.image, e.quad, rng, max_shift, scale_range)
            entries.append(GSEntry(img, e.camera, quad, f"{e.position}+aug{k + 1}", "synth", e.identity))
    return GeneratingSet(entries)


def valid_triplet_anchors(gs: GeneratingSet) -> list:
    counts = {}
    for e in gs.entries:
        counts[e.camera] = counts.get(e.camera, 0) + 1
    return [i for i, e in enumerate(gs.entries)
            if counts[e.camera] >= 2 and any(c != e.camera for c in counts)]


def sample_triplet(gs: GeneratingSet, rng: np.random.Generator) -> Triplet:
    """Uniform anchor among valid ones, then a uniform same-camera positive and other-camera negative."""
    anchors = valid_triplet_anchors(gs)
    if not anchors:
        raise SamplingError("no camera has two images while another camera has one")
    a = anchors[int(rng.integers(len(anchors)))]
    cam = gs.entries[a].camera
    pos = [i for i, e in enumerate(gs.entries) if e.camera == cam and i != a]
    neg = [i for i, e in enumerate(gs.entries) if e.camera != cam]
    p = pos[int(rng.integers(len(pos)))]
    n = neg[int(rng.integers(len(neg)))]
    return Triplet(gs.entries[a], gs.entries[p], gs.entries[n])


def sample_quadruplet(gs: GeneratingSet, targets, rng: np.random.Generator) -> Quadruplet:
    if not targets:
        raise ConfigError("impersonation needs a nonempty target set")
    t = sample_triplet(gs, rng)
    return Quadruplet(t, np.asarray(targets[int(rng.integers(len(targets)))]))


# ---------------------------------------------------------------------------
# differentiable placement


def _pattern_tensor(delta, model) -> torch.Tensor:
    pixels = delta.pixels if isinstance(delta, Pattern) else np.asarray(delta, dtype=np.float64)
    return torch.tensor(pixels, dtype=model.dtype, requires_grad=True)


def _mask_for(delta, mask) -> Mask:
    shape = (delta.pixels if isinstance(delta, Pattern) else np.asarray(delta)).shape[:2]
    if mask is None:
        return make_mask(*shape, kind="full")
    if mask.shape != tuple(shape):
        raise InvalidArgumentError(f"mask shape {mask.shape} does not match pattern {tuple(shape)}")
    return mask


def adversarial_image(entry: GSEntry, dt: torch.Tensor, mask: Mask, degradation=None) -> torch.Tensor:
    """overlay(phi(x), T(M * delta)) for one entry; ``degradation`` is (brightness, sigma) or None."""
    plan = entry.plan(dt.shape[:2])
    cov = torch.as_tensor(plan.coverage(mask), dtype=dt.dtype)
    m = torch.as_tensor(mask.values, dtype=dt.dtype)
    warped = plan.sample(dt * m[..., None]) * cov[..., None]
    x = entry.tensor(dt.dtype)
    if degradation is not None:
        x = apply_degradation(x, *degradation)
    return torch.where(cov[..., None] >= 0.5, warped, x)


def _grad(value: torch.Tensor, dt: torch.Tensor) -> np.ndarray:
    (g,) = torch.autograd.grad(value, dt)
    return g.detach().double().numpy()


def _target_batch(targets, dtype) -> torch.Tensor:
    arr = np.stack([np.asarray(t) for t in targets])
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


# ---------------------------------------------------------------------------
# objectives


def pairwise_objective(gs: GeneratingSet, delta, model, mode="evade", alpha=1.0, targets=None, mask=None):
    """Whole-set objective, minimized.

    evade:       sum over ordered cross-camera pairs (i, j) of f(x_i', x_j')
    impersonate: sum over the same pairs of f(x_i', x_j') - alpha * (f(x_i', I_t) + f(x_j', I_t))

    With several target images, f(x', I_t) is the mean score over them.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == "impersonate" and not targets:
        raise ConfigError("impersonation needs a nonempty target set")
    mask = _mask_for(delta, mask)
    dt = _pattern_tensor(delta, model)
    adv = torch.stack([adversarial_image(e, dt, mask) for e in gs.entries])
    emb = model.embed_tensor(adv)
    cams = torch.tensor([e.camera for e in gs.entries])
    cross = cams[:, None] != cams[None, :]
    sim = similarity_tensor(emb[:, None, :], emb[None, :, :])
    if mode == "evade":
        terms = sim[cross]
    else:
        t_emb = model.embed_tensor(_target_batch(targets, model.dtype))
        to_target = similarity_tensor(emb[:, None, :], t_emb[None, :, :]).mean(dim=1)
        pair_t = to_target[:, None] + to_target[None, :]
        terms = sim[cross] - alpha * pair_t[cross]
    loss = terms.sum()
    return loss.item(), _grad(loss, dt)


def _embed_tuple(model, images):
    return model.embed_tensor(torch.stack(images))


def triplet_evading_loss(t: Triplet, delta, model, beta=0.5, mask=None):
    """f(x_o', x_-') - beta * f(x_o', x_+'), minimized."""
    mask = _mask_for(delta, mask)
    dt = _pattern_tensor(delta, model)
    e = _embed_tuple(model, [adversarial_image(x, dt, mask) for x in (t.anchor, t.positive, t.negative)])
    s_neg = similarity_tensor(e[0], e[2])
    s_pos = similarity_tensor(e[0], e[1])
    loss = s_neg - beta * s_pos
    return loss.item(), _grad(loss, dt)


def quadruplet_impersonation_objective(q: Quadruplet, delta, model, lambda1=0.5, lambda2=1.0, mask=None):
    """f(x_o', t) + lambda1 * f(x_o', x_+') - lambda2 * f(x_o', x_-'), maximized."""
    mask = _mask_for(delta, mask)
    dt = _pattern_tensor(delta, model)
    t = q.triplet
    e = _embed_tuple(model, [adversarial_image(x, dt, mask) for x in (t.anchor, t.positive, t.negative)])
    e_t = model.embed_tensor(_target_batch([q.target], model.dtype))[0]
    obj = similarity_tensor(e[0], e_t) + lambda1 * similarity_tensor(e[0], e[1]) \
        - lambda2 * similarity_tensor(e[0], e[2])
    return obj.item(), _grad(obj, dt)


def _degradations(dp, rng, n):
    if dp is None:
        return [None] * n
    return [sample_degradation(dp, rng) for _ in range(n)]


def robust_evading_loss(t: Triplet, delta, mask, model, beta=0.5, kappa=1e-3, degrade_params=None, rng=None):
    """f(phi(x_o)', phi(x_-)') - beta * f(phi(x_o)', phi(x_+)') + kappa * TV(delta), minimized.

    A fresh (brightness, blur) pair is drawn from ``rng`` for each of the three
    images, in anchor, positive, negative order.
    """
    mask = _mask_for(delta, mask)
    rng = rng if rng is not None else np.random.default_rng()
    degr = _degradations(degrade_params, rng, 3)
    dt = _pattern_tensor(delta, model)
    imgs = [adversarial_image(x, dt, mask, d) for x, d in zip((t.anchor, t.positive, t.negative), degr)]
    e = _embed_tuple(model, imgs)
    s_neg = similarity_tensor(e[0], e[2])
    s_pos = similarity_tensor(e[0], e[1])
    loss = s_neg - beta * s_pos
    grad = _grad(loss, dt)
    tv, tv_grad = total_variation(dt.detach().double().numpy())
    return loss.item() + kappa * tv, grad + kappa * tv_grad


def robust_impersonation_loss(q: Quadruplet, delta, mask, model, lambda1=0.5, lambda2=1.0, kappa=1e-3,
                              degrade_params=None, rng=None):
    """Objective to maximize:
    f(phi(x_o)', t) + lambda1 * f(phi(x_o)', phi(x_+)') - lambda2 * f(phi(x_o)', phi(x_-)') - kappa * TV(delta).

    Total variation is a penalty here too, so the pattern is pushed towards
    smoothness in both attack modes.
    """
    mask = _mask_for(delta, mask)
    rng = rng if rng is not None else np.random.default_rng()
    degr = _degradations(degrade_params, rng, 3)
    dt = _pattern_tensor(delta, model)
    t = q.triplet
    imgs = [adversarial_image(x, dt, mask, d) for x, d in zip((t.anchor, t.positive, t.negative), degr)]
    e = _embed_tuple(model, imgs)
    e_t = model.embed_tensor(_target_batch([q.target], model.dtype))[0]
    obj = similarity_tensor(e[0], e_t) + lambda1 * similarity_tensor(e[0], e[1]) \
        - lambda2 * similarity_tensor(e[0], e[2])
    grad = _grad(obj, dt)
    tv, tv_grad = total_variation(dt.detach().double().numpy())
    return obj.item() - kappa * tv, grad - kappa * tv_grad


# ---------------------------------------------------------------------------
# optimization


class Adam:
    """ADAM with bias correction over a single array parameter."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class OptimizationTrace:
    rows: list = field(default_factory=list)

    def append(self, iteration, loss, grad_norm):
        self.rows.append((int(iteration), float(loss), float(grad_norm)))

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "grad_norm"])
        for it, loss, gn in self.rows:
            w.writerow([it, repr(loss), repr(gn)])
        return buf.getvalue()


def _step_loss(gs, pattern, model, cfg: AttackConfig, mask, targets, sample_rng, degrade_rng):
    """Loss to minimize and its gradient for one iteration of the configured stage."""
    if cfg.stage == "pairwise":
        return pairwise_objective(gs, pattern, model, cfg.mode, cfg.alpha, targets, mask)
    total, grad = 0.0, np.zeros_like(pattern.pixels)
    for _ in range(cfg.batch_size):
        if cfg.mode == "evade":
            t = sample_triplet(gs, sample_rng)
            if cfg.stage == "triplet":
                v, g = triplet_evading_loss(t, pattern, model, cfg.beta, mask)
            else:
                v, g = robust_evading_loss(t, pattern, mask, model, cfg.beta, cfg.kappa, cfg.degrade, degrade_rng)
        else:
            q = sample_quadruplet(gs, targets, sample_rng)
            if cfg.stage == "triplet":
                v, g = quadruplet_impersonation_objective(q, pattern, model, cfg.lambda1, cfg.lambda2, mask)
            else:
                v, g = robust_impersonation_loss(q, pattern, mask, model, cfg.lambda1, cfg.lambda2, cfg.kappa,
                                                 cfg.degrade, degrade_rng)
            v, g = -v, -g
        total += v
        grad += g
    return total / cfg.batch_size, grad / cfg.batch_size


def optimize_pattern(gs: GeneratingSet, model, cfg: AttackConfig, mask: Mask | None = None, targets=None,
                     callback=None):
    """Run ADAM on the pattern, projecting into the colour interval after every step.

    Returns ``(pattern, trace)``; the trace holds (iteration, minimized loss,
    gradient L2 norm) per step. ``callback(iteration, pattern)`` is invoked after
    each projection.
    """
    if cfg.mode == "impersonate" and not targets:
        raise ConfigError("impersonation needs a nonempty target set")
    targets = [np.asarray(getattr(t, "image", t)) for t in targets] if targets else None
    if mask is None:
        mask = make_mask(cfg.pattern_height, cfg.pattern_width, cfg.mask_kind)
    pattern = Pattern.midpoint(cfg.pattern_height, cfg.pattern_width, cfg.lower, cfg.upper)
    if mask.shape != pattern.shape:
        raise ConfigError(f"mask shape {mask.shape} does not match pattern {pattern.shape}")
    sample_seq, degrade_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    sample_rng = np.random.default_rng(sample_seq)
    degrade_rng = np.random.default_rng(degrade_seq)
    opt = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    trace = OptimizationTrace()
    for it in range(1, cfg.max_iterations + 1):
        loss, grad = _step_loss(gs, pattern, model, cfg, mask, targets, sample_rng, degrade_rng)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise OptimizationError(f"non-finite loss or gradient at iteration {it}", iteration=it)
        pattern = project_interval(pattern.with_pixels(opt.step(pattern.pixels, grad)))
        if not pattern.within_interval():
            raise OptimizationError(f"pattern left the colour interval at iteration {it}", iteration=it)
        trace.append(it, loss, np.linalg.norm(grad))
        if callback is not None:
            callback(it, pattern)
        if it % 100 == 0:
            logger.info("iteration %d loss %.4f", it, float(np.mean(trace.losses[-100:])))
    return pattern, trace
