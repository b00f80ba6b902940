"""Experiment orchestration and the ``reidpattern`` command.

A run walks six stages, each writing into ``<out>/<stage>/``::

    dataset -> model -> genset -> attack -> evaluate -> report

Every stage leaves a ``manifest.json`` recording its cache key (a hash of the
stage's config slice, the derived seed, upstream output digests and the code
version) plus a sha256 for each file it wrote. A stage whose manifest key and
output hashes still match is reused instead of recomputed.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .attack import AttackConfig, GSEntry, GeneratingSet, build_generating_set, optimize_pattern
from .dataset import ingest_dataset, write_dataset
from .errors import ConfigError, ReIDPatternError, StageError
from .evalbench import (EvalSpec, apply_pattern, check_style_gap, cmc_curve, plot_cmc, plot_trace,
                        rank_k_accuracy, run_attack_evaluation, style_gap)
from .geometry import AnchorQuad
from .imagecore import load_pattern, make_mask, save_png, save_pattern
from .physicsim import CameraStyle, ToyDatasetConfig, generate_toy_dataset
from .reid import VARIANTS, TrainConfig, load_model, save_model, train_model

logger = logging.getLogger(__name__)

STAGES = ("dataset", "model", "genset", "attack", "evaluate", "report")
COMMANDS = {
    "make-dataset": "dataset",
    "train-model": "model",
    "build-genset": "genset",
    "attack": "attack",
    "evaluate": "evaluate",
    "report": "report",
    "run": "report",
}
MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DatasetSection:
    source: str = "toy"
    path: str | None = None
    toy: ToyDatasetConfig = field(default_factory=ToyDatasetConfig)
    genset_split: str = "train"
    eval_split: str = "test"


@dataclass
class ModelSection:
    variant: str = "classification_embedding"
    checkpoint: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    check_style_gap: bool = True


@dataclass
class AttackSection:
    adversary: int | None = None
    target: int | None = None
    n_augment: int = 4
    max_shift: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    config: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class EvaluationSection:
    spec: EvalSpec = field(default_factory=EvalSpec)
    ranks: tuple = (1, 5, 10)
    cmc_max_rank: int = 20


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/experiment"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        ds = self.dataset
        if ds.source not in ("toy", "path"):
            raise ConfigError(f"dataset.source must be 'toy' or 'path', got {ds.source!r}")
        if ds.source == "path" and not ds.path:
            raise ConfigError("dataset.path is required when dataset.source is 'path'")
        if self.model.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}")
        at = self.attack
        if at.n_augment < 0:
            raise ConfigError("attack.n_augment must be non-negative")
        if at.config.mode == "impersonate":
            if at.target is None:
                raise ConfigError("impersonate mode needs attack.target (the identity to impersonate)")
            if at.adversary is not None and at.target == at.adversary:
                raise ConfigError("attack.target must differ from attack.adversary")
        ranks = self.evaluation.ranks
        if not ranks or any(int(k) < 1 for k in ranks):
            raise ConfigError("evaluation.ranks must be a non-empty list of positive integers")
        if self.evaluation.cmc_max_rank < 1:
            raise ConfigError("evaluation.cmc_max_rank must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attack"]["config"] = self.attack.config.to_dict()
        return _plain(d)

    def with_overrides(self, seed=None, mode=None, out=None) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        if seed is not None:
            cfg.seed = seed
        if out is not None:
            cfg.out = str(out)
        if mode is not None:
            cfg.attack.config = dataclasses.replace(cfg.attack.config, mode=mode)
        cfg.validate()
        return cfg


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# seeds live only at the top level and are derived per stage
_SECTIONS = {
    "dataset": (DatasetSection, {"toy": ToyDatasetConfig}),
    "model": (ModelSection, {"train": TrainConfig}),
    "attack": (AttackSection, {"config": AttackConfig}),
    "evaluation": (EvaluationSection, {"spec": EvalSpec}),
}


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if "seed" in data:
        raise ConfigError(f"{where}.seed is not allowed; set the top-level seed instead")
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    unknown = set(data) - {"seed", "out", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, (cls, nested) in _SECTIONS.items():
        raw = data.get(name) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{name} must be a mapping")
        raw = dict(raw)
        if name == "dataset" and isinstance(raw.get("toy"), dict) and raw["toy"].get("camera_styles"):
            raw["toy"] = dict(raw["toy"], camera_styles=_camera_styles(raw["toy"]["camera_styles"]))
        for key, sub in nested.items():
            raw[key] = _build(sub, raw.get(key), f"{name}.{key}")
        for key in ("scale_range", "ranks"):
            if key in raw:
                raw[key] = tuple(raw[key])
        sections[name] = _build(cls, raw, name)
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    return ExperimentConfig(seed=seed, out=str(data.get("out", "runs/experiment")), **sections)


def _camera_styles(items):
    try:
        return tuple(CameraStyle(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
                     for d in items)
    except TypeError as e:
        raise ConfigError(f"invalid dataset.toy.camera_styles: {e}") from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping at the top level")
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# hashing and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def tree_digest(root) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode() + b"\0" + sha256_file(p).encode())
    return h.hexdigest()


@lru_cache(maxsize=1)
def code_version() -> str:
    """Package version plus a digest of the package sources, so code edits invalidate caches."""
    return f"{__version__}+{_source_digest(Path(__file__).parent)[:12]}"


def _source_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def stage_seed(seed: int, stage: str) -> int:
    child = np.random.SeedSequence(seed).spawn(len(STAGES))[STAGES.index(stage)]
    return int(child.generate_state(1)[0])


def _outputs(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): sha256_file(p)
            for p in sorted(d.rglob("*")) if p.is_file() and p.name != MANIFEST}


def _valid_cache(d: Path, key: str):
    mpath = d / MANIFEST
    if not mpath.is_file():
        return None
    try:
        manifest = json.loads(mpath.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if manifest.get("key") != key:
        return None
    for rel, digest in manifest.get("outputs", {}).items():
        p = d / rel
        if not p.is_file() or sha256_file(p) != digest:
            return None
    return manifest


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class RunResult:
    out: Path
    manifests: dict
    cache_hits: list

    def path(self, stage, name) -> Path:
        return self.out / stage / name


class Pipeline:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.manifests = {}
        self.cache_hits = []
        self._dataset = None

    # -- helpers

    def seed(self, stage) -> int:
        return stage_seed(self.cfg.seed, stage)

    def dir(self, stage) -> Path:
        return self.out / stage

    def digest(self, stage) -> str:
        return self.manifests[stage]["digest"]

    def dataset(self):
        if self._dataset is None:
            if self.cfg.dataset.source == "toy":
                self._dataset = ingest_dataset(self.dir("dataset") / "images")
            else:
                self._dataset = ingest_dataset(self.cfg.dataset.path)
        return self._dataset

    def split(self, name):
        ds = self.dataset()
        if name not in ds.splits:
            raise ConfigError(f"split {name!r} not found; dataset has {ds.splits}")
        return ds.split(name)

    def adversary_id(self) -> int:
        adv = self.cfg.attack.adversary
        ids = self.split(self.cfg.dataset.genset_split).identities
        if adv is None:
            adv = next((i for i in ids if i != self.cfg.attack.target), None)
        if adv not in ids:
            raise ConfigError(f"adversary identity {adv} not present in split {self.cfg.dataset.genset_split!r}")
        return adv

    def _stage(self, name, config_part, upstream, produce):
        d = self.dir(name)
        key_src = {"stage": name, "config": config_part, "seed": self.seed(name),
                   "upstream": {u: self.digest(u) for u in upstream}, "code_version": code_version()}
        key = _sha256_json(key_src)
        cached = _valid_cache(d, key)
        if cached is not None:
            logger.info("stage %s: cache hit", name)
            self.manifests[name] = cached
            self.cache_hits.append(name)
            return cached
        logger.info("stage %s: running", name)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        try:
            extra = produce(d) or {}
        except StageError:
            raise
        except Exception as e:
            raise StageError(name, e) from e
        outputs = _outputs(d)
        manifest = {
            **key_src,
            "key": key,
            "global_seed": self.cfg.seed,
            "outputs": outputs,
            "digest": _sha256_json(outputs),
            **extra,
        }
        (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.manifests[name] = manifest
        return manifest

    # -- stages

    def stage_dataset(self):
        ds_cfg = self.cfg.dataset
        if ds_cfg.source == "toy":
            toy = dataclasses.replace(ds_cfg.toy, seed=self.seed("dataset"))
            part = {"source": "toy", "toy": _plain(dataclasses.asdict(toy))}

            def produce(d):
                ds = generate_toy_dataset(toy)
                write_dataset(ds, d / "images")
                return {"summary": _summary(ingest_dataset(d / "images"))}
        else:
            src = Path(ds_cfg.path)
            if not src.is_dir():
                raise StageError("dataset", ConfigError(f"dataset path {src} is not a directory"))
            part = {"source": "path", "path": str(src.resolve()), "content": tree_digest(src)}

            def produce(d):
                ds = ingest_dataset(src)
                summary = _summary(ds)
                (d / "dataset.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
                return {"summary": summary}
        return self._stage("dataset", part, [], produce)

    def stage_model(self):
        mc = self.cfg.model
        tc = dataclasses.replace(mc.train, seed=self.seed("model"))
        part = {"variant": mc.variant, "train": _plain(dataclasses.asdict(tc)),
                "eval_split": self.cfg.dataset.eval_split, "check_style_gap": mc.check_style_gap}
        if mc.checkpoint:
            part["checkpoint_sha256"] = sha256_file(mc.checkpoint)

        def produce(d):
            if mc.checkpoint:
                model = load_model(mc.checkpoint)
                if model.variant != mc.variant:
                    raise ConfigError(f"checkpoint variant {model.variant!r} != configured {mc.variant!r}")
            else:
                model = train_model(self.dataset(), mc.variant, tc, eval_split=self.cfg.dataset.eval_split)
            info = {k: v for k, v in model.metadata.items() if k in ("heldout_rank1", "heldout_map")}
            held = self.split(self.cfg.dataset.eval_split)
            if mc.check_style_gap and self.cfg.dataset.source == "toy":
                info["style_gap"] = check_style_gap(model, held)
            else:
                info["style_gap"] = style_gap(model, held)
            save_model(model, d / "model.pt")
            (d / "model.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
            return {"model": info}
        return self._stage("model", part, ["dataset"], produce)

    def stage_genset(self):
        at = self.cfg.attack
        part = {"adversary": at.adversary, "target": at.target, "n_augment": at.n_augment,
                "max_shift": at.max_shift, "scale_range": list(at.scale_range),
                "split": self.cfg.dataset.genset_split}

        def produce(d):
            adv = self.adversary_id()
            src = self.split(self.cfg.dataset.genset_split)
            gs = build_generating_set(src.select(adv), at.n_augment, np.random.default_rng(self.seed("genset")),
                                      at.max_shift, tuple(at.scale_range))
            arrays = {
                "images": np.stack([e.image for e in gs.entries]).astype(np.float32),
                "cameras": np.array([e.camera for e in gs.entries]),
                "quads": np.stack([e.quad.array for e in gs.entries]),
                "positions": np.array([e.position for e in gs.entries]),
                "provenance": np.array([e.provenance for e in gs.entries]),
                "identity": np.array(adv),
            }
            if at.target is not None:
                targets = src.select(at.target)
                if not targets:
                    raise ConfigError(f"target identity {at.target} has no images in split "
                                      f"{self.cfg.dataset.genset_split!r}")
                arrays["targets"] = np.stack([t.image for t in targets]).astype(np.float32)
            np.savez_compressed(d / "genset.npz", **arrays)
            return {"genset": {"adversary": adv, "entries": len(gs), "cameras": gs.cameras}}
        return self._stage("genset", part, ["dataset"], produce)

    def stage_attack(self):
        acfg = dataclasses.replace(self.cfg.attack.config, seed=self.seed("attack"))
        part = {"attack": acfg.to_dict()}

        def produce(d):
            model = load_model(self.dir("model") / "model.pt")
            gs, targets = load_genset(self.dir("genset") / "genset.npz")
            if acfg.mode == "impersonate" and targets is None:
                raise ConfigError("impersonate mode needs target images in the generating set")
            mask = make_mask(acfg.pattern_height, acfg.pattern_width, acfg.mask_kind)
            pattern, trace = optimize_pattern(gs, model, acfg, mask=mask,
                                              targets=targets if acfg.mode == "impersonate" else None)
            save_pattern(d / "pattern.png", pattern, mask)
            (d / "trace.csv").write_text(trace.to_csv())
            if trace.rows:
                plot_trace(trace.rows, d / "trace.png")
            losses = trace.losses
            return {"attack_summary": {
                "iterations": len(losses),
                "first_loss": float(losses[0]) if len(losses) else None,
                "final_loss": float(losses[-1]) if len(losses) else None,
            }}
        return self._stage("attack", part, ["model", "genset"], produce)

    def stage_evaluate(self):
        ev = self.cfg.evaluation
        spec = dataclasses.replace(ev.spec, seed=self.seed("evaluate"))
        part = {"spec": _plain(dataclasses.asdict(spec)), "ranks": list(ev.ranks), "cmc_max_rank": ev.cmc_max_rank,
                "genset_split": self.cfg.dataset.genset_split, "eval_split": self.cfg.dataset.eval_split,
                "target": self.cfg.attack.target, "mode": self.cfg.attack.config.mode}

        def produce(d):
            model = load_model(self.dir("model") / "model.pt")
            pattern, mask = load_pattern(self.dir("attack") / "pattern.png")
            adv = int(np.load(self.dir("genset") / "genset.npz")["identity"])
            held = self.split(self.cfg.dataset.eval_split)
            target = self.cfg.attack.target if self.cfg.attack.config.mode == "impersonate" else None
            distractors = [s for s in held if s.identity not in (adv, target)]
            tgt = held.select(target) if target is not None else None
            summary, curves = {}, {}
            for label, split in (("generating", self.cfg.dataset.genset_split), ("testing", self.cfg.dataset.eval_split)):
                advs = self.split(split).select(adv)
                table = run_attack_evaluation(model, advs, distractors, spec, pattern, mask, targets=tgt,
                                              title=f"{label} set ({split} split, adversary {adv})")
                (d / f"metrics_{label}.txt").write_text(table.to_text())
                (d / f"metrics_{label}.csv").write_text(table.to_csv())
                summary[label] = {
                    cond: {f"rank{k}": rank_k_accuracy(res, int(k)) for k in ev.ranks}
                    for cond, res in table.results.items()
                }
                for cond, res in table.results.items():
                    curves[f"{label} {cond}"] = cmc_curve(res, ev.cmc_max_rank)
            plot_cmc(curves, d / "cmc.png")
            (d / "ranks.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            return {"adversary": adv}
        return self._stage("evaluate", part, ["model", "genset", "attack", "dataset"], produce)

    def stage_report(self):
        def produce(d):
            pattern, mask = load_pattern(self.dir("attack") / "pattern.png")
            adv = self.manifests["evaluate"]["adversary"]
            held = self.split(self.cfg.dataset.eval_split).select(adv)
            picks = held[:: max(1, len(held) // 4)][:4]
            strip = np.concatenate([np.concatenate([s.image, apply_pattern(s.image, s.quad, pattern, mask)], 1)
                                    for s in picks], 1)
            save_png(d / "examples.png", strip)
            tables = [(self.dir("evaluate") / f"metrics_{k}.txt").read_text() for k in ("generating", "testing")]
            (d / "metrics.txt").write_text("\n".join(tables))
            (d / "report.md").write_text(self._report_text(tables))
        return self._stage("report", {}, ["model", "genset", "attack", "evaluate"], produce)

    def _report_text(self, tables) -> str:
        cfg = self.cfg
        model_info = self.manifests["model"].get("model", {})
        att = self.manifests["attack"].get("attack_summary", {})
        gap = model_info.get("style_gap", {})
        ranks = json.loads((self.dir("evaluate") / "ranks.json").read_text())
        lines = [
            f"# Attack report ({cfg.attack.config.mode}, seed {cfg.seed})",
            "",
            f"- code version: {code_version()}",
            f"- model: {cfg.model.variant}, held-out rank-1 {_fmt(model_info.get('heldout_rank1'))}, "
            f"mAP {_fmt(model_info.get('heldout_map'))}",
            f"- style gap (mean distance): cross-camera {_fmt(gap.get('cross_camera'))}, "
            f"same-camera {_fmt(gap.get('same_camera'))}",
            f"- adversary {self.manifests['evaluate']['adversary']}"
            + (f", target {cfg.attack.target}" if cfg.attack.config.mode == "impersonate" else ""),
            f"- optimisation: {att.get('iterations')} iterations, loss {_fmt(att.get('first_loss'))} -> "
            f"{_fmt(att.get('final_loss'))}",
            "",
            "Artifacts: `../attack/pattern.png`, `../attack/trace.csv`, `../attack/trace.png`, "
            "`../evaluate/cmc.png`, `examples.png` (clean and attacked pairs from the held-out split).",
            "",
        ]
        for text in tables:
            lines += ["```", text.rstrip("\n"), "```", ""]
        lines.append("Rank-k accuracy per condition:")
        lines.append("")
        for label, conds in ranks.items():
            for cond, vals in conds.items():
                cells = ", ".join(f"rank-{k} {vals[f'rank{k}']:.3f}" for k in cfg.evaluation.ranks)
                lines.append(f"- {label} {cond}: {cells}")
        return "\n".join(lines) + "\n"

    def run(self, until="report") -> RunResult:
        if until not in STAGES:
            raise ConfigError(f"unknown stage {until!r}; choose from {STAGES}")
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {self.out}: {e}") from e
        if not os.access(self.out, os.W_OK):
            raise ConfigError(f"output directory {self.out} is not writable")
        (self.out / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        steps = {"dataset": self.stage_dataset, "model": self.stage_model, "genset": self.stage_genset,
                 "attack": self.stage_attack, "evaluate": self.stage_evaluate, "report": self.stage_report}
        for name in STAGES[: STAGES.index(until) + 1]:
            steps[name]()
        return RunResult(self.out, dict(self.manifests), list(self.cache_hits))


def run_experiment(cfg: ExperimentConfig, until="report") -> RunResult:
    cfg.validate()
    return Pipeline(cfg).run(until)


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"


def _summary(ds) -> dict:
    return {"images": len(ds), "identities": len(ds.identities), "cameras": ds.cameras,
            "splits": {s: len(ds.split(s)) for s in ds.splits}, "fingerprint": ds.fingerprint()}


def load_genset(path):
    """Read a generating set written by the genset stage; returns ``(GeneratingSet, targets | None)``."""
    z = np.load(path)
    identity = int(z["identity"])
    entries = [GSEntry(img, int(cam), AnchorQuad(q), str(pos), str(prov), identity)
               for img, cam, q, pos, prov in zip(z["images"], z["cameras"], z["quads"], z["positions"],
                                                 z["provenance"])]
    targets = list(z["targets"]) if "targets" in z.files else None
    return GeneratingSet(entries), targets


# ---------------------------------------------------------------------------
# command line


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidpattern",
                                     description="Optimise and evaluate adversarial clothing patterns "
                                                 "against person re-identification models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "make-dataset": "generate or ingest the dataset",
        "train-model": "train (or load) the re-ID model",
        "build-genset": "build the adversary's augmented generating set",
        "attack": "optimise the adversarial pattern",
        "evaluate": "score clean and attacked queries",
        "report": "write the report bundle",
        "run": "run the full pipeline (or stop after --stage)",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--mode", choices=("evade", "impersonate"), help="override attack mode")
        p.add_argument("--out", type=Path, help="override the output directory")
        if name == "run":
            p.add_argument("--stage", choices=STAGES, default="report", help="last stage to run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = cfg.with_overrides(seed=args.seed, mode=args.mode, out=args.out)
        until = args.stage if args.command == "run" else COMMANDS[args.command]
        result = run_experiment(cfg, until)
    except ReIDPatternError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    done = list(result.manifests)
    hits = f" (cached: {', '.join(result.cache_hits)})" if result.cache_hits else ""
    print(f"completed stages {', '.join(done)} in {result.out}{hits}")
    if until in ("evaluate", "report"):
        print((result.out / "evaluate" / "metrics_testing.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
