"""Probe/gallery retrieval protocol and metrics.

Relevance follows the cross-camera convention: a gallery item is relevant to a
probe when it shows the same identity under a different camera, and items with
the probe's identity *and* camera are left out of the ranking. For target-match
queries (impersonation) relevance is "shows the target identity" instead.
Ties in score are broken by ascending gallery index.
"""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidArgumentError, ProtocolError
from .geometry import overlay, plan_for_quad
from .reid import embed, embed_batch, score_from_embeddings

logger = logging.getLogger(__name__)


@dataclass
class GalleryItem:
    identity: int
    camera: int
    image: np.ndarray | None = None
    embedding: np.ndarray | None = None
    adversarial: bool = False


@dataclass
class Gallery:
    items: list

    def __post_init__(self):
        if not self.items:
            raise InvalidArgumentError("gallery is empty")

    def __len__(self):
        return len(self.items)

    def embeddings(self, model) -> np.ndarray:
        missing = [i for i, it in enumerate(self.items) if it.embedding is None]
        if missing:
            emb = embed_batch(model, [self.items[i].image for i in missing])
            for i, e in zip(missing, emb):
                self.items[i].embedding = e
        return np.stack([it.embedding for it in self.items])

    @property
    def identities(self) -> np.ndarray:
        return np.array([it.identity for it in self.items])

    @property
    def cameras(self) -> np.ndarray:
        return np.array([it.camera for it in self.items])


@dataclass
class Probe:
    identity: int
    camera: int
    image: np.ndarray | None = None
    embedding: np.ndarray | None = None
    adversarial: bool = False


@dataclass
class QueryResult:
    probe_identity: int
    probe_camera: int
    probe_adversarial: bool
    ranking: np.ndarray
    scores: np.ndarray
    relevant: np.ndarray
    gallery_size: int = 0

    @property
    def first_relevant_rank(self):
        hits = np.flatnonzero(self.relevant)
        return int(hits[0]) + 1 if hits.size else None


def rank_scores(scores, identities, cameras, probe_identity, probe_camera,
                target_identity=None, probe_adversarial=False) -> QueryResult:
    """Order gallery scores into a :class:`QueryResult`."""
    scores = np.asarray(scores, dtype=np.float64)
    identities = np.asarray(identities)
    cameras = np.asarray(cameras)
    keep = ~((identities == probe_identity) & (cameras == probe_camera))
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((idx, -scores[idx]))]
    if target_identity is None:
        rel = (identities[order] == probe_identity) & (cameras[order] != probe_camera)
    else:
        rel = identities[order] == target_identity
    return QueryResult(probe_identity, probe_camera, probe_adversarial, order, scores[order], rel, len(scores))


def run_query(model, probe: Probe, gallery: Gallery, target_identity=None) -> QueryResult:
    """Score every gallery item against the probe and rank them (descending score)."""
    if gallery is None or len(gallery) == 0:
        raise InvalidArgumentError("gallery is empty")
    pe = probe.embedding if probe.embedding is not None else embed(model, probe.image)
    scores = score_from_embeddings(gallery.embeddings(model), pe[None, :])
    return rank_scores(scores, gallery.identities, gallery.cameras, probe.identity, probe.camera,
                       target_identity, probe.adversarial)


def rank_k_accuracy(results, k: int) -> float:
    """Fraction of queries with at least one relevant item among the top ``k``."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not results:
        raise InvalidArgumentError("no query results")
    hits = 0
    for r in results:
        kk = k
        if k > len(r.ranking):
            kk = len(r.ranking)
            msg = f"rank-{k} requested on a ranking of {len(r.ranking)} items; clamped"
            logger.warning(msg)
            warnings.warn(msg, stacklevel=2)
        hits += bool(np.any(r.relevant[:kk]))
    return hits / len(results)


def average_precision(relevant) -> float:
    """AP of one ranked relevance vector: mean precision at each relevant position."""
    rel = np.asarray(relevant, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ProtocolError("average precision undefined without relevant items")
    positions = np.flatnonzero(rel) + 1
    precision = np.arange(1, n_rel + 1) / positions
    return float(precision.mean())


def mean_average_precision(results, diagnostics: dict | None = None) -> float:
    """Mean AP over queries that have at least one relevant item.

    Queries without relevant items are skipped; their count is written to
    ``diagnostics["excluded_queries"]`` when a dict is supplied.
    """
    aps = [average_precision(r.relevant) for r in results if np.any(r.relevant)]
    excluded = len(results) - len(aps)
    if diagnostics is not None:
        diagnostics["excluded_queries"] = excluded
    if not aps:
        raise ProtocolError("no query has a relevant gallery item")
    if excluded:
        logger.info("mAP: %d queries without relevant items excluded", excluded)
    return float(np.mean(aps))


def mean_relevant_similarity(results) -> float:
    """Average over queries of the mean score given to relevant items (the ``ss`` column)."""
    vals = [float(r.scores[r.relevant].mean()) for r in results if np.any(r.relevant)]
    return float(np.mean(vals)) if vals else float("nan")


def cmc_curve(results, max_k) -> np.ndarray:
    return np.array([rank_k_accuracy(results, k) for k in range(1, max_k + 1)])


# ---------------------------------------------------------------------------
# tables

COLUMNS = ("rank1", "rank5", "rank10", "mAP", "ss")
DELTA_COLUMNS = ("d_rank1", "d_mAP", "d_ss")


@dataclass
class MetricsRow:
    condition: str
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    ss: float
    queries: int
    d_rank1: float | None = None
    d_mAP: float | None = None
    d_ss: float | None = None


def summarize(condition, results) -> MetricsRow:
    diag = {}
    try:
        m_ap = mean_average_precision(results, diag)
    except ProtocolError:
        m_ap = 0.0
    return MetricsRow(condition, rank_k_accuracy(results, 1), rank_k_accuracy(results, 5),
                      rank_k_accuracy(results, 10), m_ap, mean_relevant_similarity(results), len(results))


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)
    title: str = ""
    results: dict = field(default_factory=dict, repr=False)

    def row(self, condition) -> MetricsRow:
        for r in self.rows:
            if r.condition == condition:
                return r
        raise KeyError(condition)

    def _cells(self, r: MetricsRow):
        def fmt(v):
            return "" if v is None else f"{v:.3f}"
        return [r.condition] + [fmt(getattr(r, c)) for c in COLUMNS] + [str(r.queries)] + \
            [fmt(getattr(r, c)) for c in DELTA_COLUMNS]

    def header(self):
        return ["condition", *COLUMNS, "queries", *DELTA_COLUMNS]

    def to_text(self) -> str:
        rows = [self.header()] + [self._cells(r) for r in self.rows]
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = [self.title] if self.title else []
        for j, row in enumerate(rows):
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for r in self.rows:
            w.writerow(self._cells(r))
        return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation protocols


def evaluate_retrieval(model, samples) -> dict:
    """All-vs-all cross-camera retrieval over ``samples`` (each sample is a probe once)."""
    samples = list(samples)
    emb = embed_batch(model, [s.image for s in samples])
    ids = np.array([s.identity for s in samples])
    cams = np.array([s.camera for s in samples])
    scores = score_from_embeddings(emb[:, None, :], emb[None, :, :])
    results = []
    for i in range(len(samples)):
        r = rank_scores(scores[i], ids, cams, ids[i], cams[i])
        if np.any(r.relevant):
            results.append(r)
    if not results:
        raise ProtocolError("no probe has a cross-camera match")
    row = summarize("clean", results)
    return {"rank1": row.rank1, "rank5": row.rank5, "rank10": row.rank10, "mAP": row.mAP,
            "ss": row.ss, "queries": len(results), "results": results}


def style_gap(model, samples) -> dict:
    """Mean embedding distance of same-identity pairs, split by same vs different camera."""
    samples = list(samples)
    emb = embed_batch(model, [s.image for s in samples])
    ids = np.array([s.identity for s in samples])
    cams = np.array([s.camera for s in samples])
    dist = 1.0 - score_from_embeddings(emb[:, None, :], emb[None, :, :])
    same_id = (ids[:, None] == ids[None, :]) & ~np.eye(len(samples), dtype=bool)
    same_cam = cams[:, None] == cams[None, :]
    cross, within = same_id & ~same_cam, same_id & same_cam
    if not cross.any() or not within.any():
        raise ProtocolError("style gap needs same-identity pairs both within and across cameras")
    return {"cross_camera": float(dist[cross].mean()), "same_camera": float(dist[within].mean())}


def check_style_gap(model, samples) -> dict:
    """Reject datasets whose cameras do not separate an identity's images more than a single camera does."""
    gap = style_gap(model, samples)
    if not gap["cross_camera"] > gap["same_camera"]:
        raise ConfigError(
            f"no cross-camera style gap: cross-camera distance {gap['cross_camera']:.4f} "
            f"<= same-camera distance {gap['same_camera']:.4f}")
    return gap


def apply_pattern(image, quad, pattern, mask):
    """Overlay the masked, warped pattern onto a single image (numpy)."""
    pixels = pattern.pixels if hasattr(pattern, "pixels") else np.asarray(pattern)
    h, w = image.shape[:2]
    plan = plan_for_quad(pixels.shape[:2], quad, h, w)
    cov = plan.coverage(mask)
    warped = plan.sample(pixels * mask.values[..., None]) * cov[..., None]
    return overlay(image, warped.astype(image.dtype), cov)


@dataclass
class EvalSpec:
    n_queries: int = 100
    adversary_gallery_size: int = 12
    distractor_images_per_identity: int = 4
    min_distractor_identities: int = 1
    target_gallery_size: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.n_queries < 1 or self.adversary_gallery_size < 1:
            raise ConfigError("n_queries and adversary_gallery_size must be positive")


def run_attack_evaluation(model, adversary, distractors, spec: EvalSpec, pattern=None, mask=None,
                          targets=None, title="") -> MetricsTable:
    """Query the adversary's images against per-query galleries, with and without the pattern.

    Each query draws a probe from ``adversary``, then a gallery of up to
    ``adversary_gallery_size`` adversary images from other cameras, up to
    ``distractor_images_per_identity`` images of every distractor identity and,
    when ``targets`` is given, up to ``target_gallery_size`` target images. The
    same draws serve the clean and attacked conditions; in the attacked one all
    adversary images wear the pattern.
    """
    adversary = list(adversary)
    distractors = list(distractors)
    if len({s.camera for s in adversary}) < 2:
        raise ConfigError("adversary images must span at least 2 cameras")
    target_ids = {s.identity for s in targets} if targets else set()
    adv_ids = {s.identity for s in adversary}
    distractors = [s for s in distractors if s.identity not in adv_ids | target_ids]
    d_ids = sorted({s.identity for s in distractors})
    if len(d_ids) < spec.min_distractor_identities:
        raise ConfigError(f"need {spec.min_distractor_identities} distractor identities, have {len(d_ids)}")
    if targets is not None and not targets:
        raise ConfigError("target set is empty")
    target_id = next(iter(target_ids)) if targets else None

    rng = np.random.default_rng(spec.seed)
    adv_clean = embed_batch(model, [s.image for s in adversary])
    if pattern is not None:
        attacked = [apply_pattern(s.image, s.quad, pattern, mask) for s in adversary]
        adv_attacked = embed_batch(model, attacked)
    else:
        adv_attacked = adv_clean
    dis_emb = embed_batch(model, [s.image for s in distractors]) if distractors else np.zeros((0, model.embedding_dim))
    tgt = list(targets or [])
    tgt_emb = embed_batch(model, [s.image for s in tgt]) if tgt else np.zeros((0, model.embedding_dim))
    adv_cams = np.array([s.camera for s in adversary])
    adv_pid = adversary[0].identity
    dis_by_id = {pid: np.flatnonzero(np.array([s.identity for s in distractors]) == pid) for pid in d_ids}

    eligible = [i for i in range(len(adversary)) if np.any(adv_cams != adv_cams[i])]
    buckets = {k: [] for k in ("clean/self", "attacked/self", "clean/target", "attacked/target")}
    for _ in range(spec.n_queries):
        p = int(rng.choice(eligible))
        cross = np.flatnonzero(adv_cams != adv_cams[p])
        g_adv = rng.choice(cross, size=min(spec.adversary_gallery_size, len(cross)), replace=False)
        g_dis = []
        for pid in d_ids:
            pool = dis_by_id[pid]
            g_dis.extend(rng.choice(pool, size=min(spec.distractor_images_per_identity, len(pool)), replace=False))
        g_dis = np.asarray(g_dis, dtype=np.int64)
        g_tgt = (rng.choice(len(tgt), size=min(spec.target_gallery_size, len(tgt)), replace=False)
                 if tgt else np.zeros(0, dtype=np.int64))
        ids = np.concatenate([[adv_pid] * len(g_adv), [distractors[i].identity for i in g_dis],
                              [tgt[i].identity for i in g_tgt]]).astype(np.int64)
        cams = np.concatenate([adv_cams[g_adv], [distractors[i].camera for i in g_dis],
                               [tgt[i].camera for i in g_tgt]]).astype(np.int64)
        for cond, adv_emb in (("clean", adv_clean), ("attacked", adv_attacked)):
            gal = np.concatenate([adv_emb[g_adv], dis_emb[g_dis], tgt_emb[g_tgt]])
            scores = score_from_embeddings(gal, adv_emb[p][None, :])
            adversarial = cond == "attacked"
            buckets[f"{cond}/self"].append(rank_scores(scores, ids, cams, adv_pid, adv_cams[p],
                                                       probe_adversarial=adversarial))
            if tgt:
                buckets[f"{cond}/target"].append(rank_scores(scores, ids, cams, adv_pid, adv_cams[p],
                                                             target_identity=target_id,
                                                             probe_adversarial=adversarial))

    table = MetricsTable(title=title, results={k: v for k, v in buckets.items() if v})
    clean = summarize("clean/self", buckets["clean/self"])
    table.rows.append(clean)
    if pattern is not None:
        att = summarize("attacked/self", buckets["attacked/self"])
        att.d_rank1 = clean.rank1 - att.rank1
        att.d_mAP = clean.mAP - att.mAP
        att.d_ss = clean.ss - att.ss
        table.rows.append(att)
    if tgt:
        c_t = summarize("clean/target", buckets["clean/target"])
        table.rows.append(c_t)
        if pattern is not None:
            a_t = summarize("attacked/target", buckets["attacked/target"])
            a_t.d_rank1 = c_t.rank1 - a_t.rank1
            a_t.d_mAP = c_t.mAP - a_t.mAP
            a_t.d_ss = c_t.ss - a_t.ss
            table.rows.append(a_t)
    return table


# ---------------------------------------------------------------------------
# plots


def plot_trace(trace, path, window=50) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = np.array([t[0] for t in trace])
    loss = np.array([t[1] for t in trace])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, loss, lw=0.6, alpha=0.5, label="loss")
    if len(loss) >= window:
        smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
        ax.plot(it[window - 1:], smooth, lw=1.5, label=f"mean over {window}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective (minimized)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_cmc(curves: dict, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, c in curves.items():
        ax.plot(np.arange(1, len(c) + 1), c, marker="o", ms=3, label=name)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
