import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch
import yaml

from reidpattern.attack import AttackConfig, GSEntry, GeneratingSet, build_generating_set, optimize_pattern
from reidpattern.evalbench import EvalSpec, run_attack_evaluation
from reidpattern.geometry import AnchorQuad
from reidpattern.imagecore import make_mask
from reidpattern.physicsim import ToyDatasetConfig, generate_toy_dataset
from reidpattern.reid import EmbeddingNet, ReIDModel, TrainConfig, train_model


def make_tiny_model(seed=0, input_size=(32, 16), embedding_dim=16, width=4, dtype=torch.float32):
    torch.manual_seed(seed)
    net = EmbeddingNet(embedding_dim, width)
    arch = {"embedding_dim": embedding_dim, "width": width, "num_classes": 0, "verification": False}
    return ReIDModel(net, "classification_embedding", input_size, embedding_dim, arch).to(dtype)


@pytest.fixture
def tiny_model():
    return make_tiny_model()


@pytest.fixture
def tiny_model64():
    return make_tiny_model(dtype=torch.float64)


def random_entries(rng, cameras=(1, 1, 2, 2), h=32, w=16, identity=7):
    quad = AnchorQuad.from_rect(3.0, 6.0, 12.0, 20.0)
    return [GSEntry(rng.uniform(0, 1, (h, w, 3)), cam, quad, f"p{i}", "original", identity)
            for i, cam in enumerate(cameras)]


@pytest.fixture
def tiny_gs():
    return GeneratingSet(random_entries(np.random.default_rng(1)))


@pytest.fixture(scope="session")
def toy_dataset():
    """Default toy dataset: 20 identities x 3 cameras x 30 images."""
    return generate_toy_dataset(ToyDatasetConfig())


@pytest.fixture(scope="session")
def toy_model(toy_dataset):
    """Classification-embedding model trained once per session on the default toy dataset."""
    start = time.perf_counter()
    model = train_model(toy_dataset, "classification_embedding", TrainConfig())
    model.metadata["train_seconds"] = time.perf_counter() - start
    return model


@dataclass
class AttackRun:
    gs: GeneratingSet
    pattern: object
    trace: object
    targets: list
    tables: dict
    seconds: float


ADVERSARY, TARGET = 1, 2


def _attack_run(dataset, model, mode):
    train, test = dataset.split("train"), dataset.split("test")
    gs = build_generating_set(train.select(ADVERSARY), 4, np.random.default_rng(0))
    cfg = AttackConfig(mode=mode)
    targets = [s.image for s in train.select(TARGET)] if mode == "impersonate" else None
    start = time.perf_counter()
    pattern, trace = optimize_pattern(gs, model, cfg, targets=targets)
    mask = make_mask(cfg.pattern_height, cfg.pattern_width, cfg.mask_kind)
    held_targets = test.select(TARGET) if mode == "impersonate" else None
    distractors = [s for s in test if s.identity not in (ADVERSARY, TARGET if targets else None)]
    tables = {label: run_attack_evaluation(model, split.select(ADVERSARY), distractors, EvalSpec(), pattern, mask,
                                           targets=held_targets, title=label)
              for label, split in (("generating", train), ("testing", test))}
    return AttackRun(gs, pattern, trace, targets, tables, time.perf_counter() - start)


@pytest.fixture(scope="session")
def evade_run(toy_dataset, toy_model):
    """Default 700-iteration robust evading attack by identity 1."""
    return _attack_run(toy_dataset, toy_model, "evade")


@pytest.fixture(scope="session")
def impersonate_run(toy_dataset, toy_model):
    """Identity 1 impersonating identity 2 with the default config."""
    return _attack_run(toy_dataset, toy_model, "impersonate")


TINY_RUN = {
    "seed": 3,
    "dataset": {"toy": {"identity_count": 6, "images_per_identity_per_camera": 6}},
    "model": {"train": {"epochs": 3}},
    "attack": {"config": {"max_iterations": 30}},
    "evaluation": {"spec": {"n_queries": 10}},
}


def write_config(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="session")
def tiny_run_config(tmp_path_factory):
    """YAML config for a full pipeline run that finishes in seconds."""
    return write_config(tmp_path_factory.mktemp("cfg") / "tiny.yaml", TINY_RUN)
