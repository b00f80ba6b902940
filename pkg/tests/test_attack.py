import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_entries
from reidpattern.attack import (Adam, AttackConfig, GeneratingSet, Quadruplet, Triplet, adversarial_image,
                                build_generating_set, optimize_pattern, pairwise_objective,
                                quadruplet_impersonation_objective, robust_evading_loss, robust_impersonation_loss,
                                sample_quadruplet, sample_triplet, triplet_evading_loss)
from reidpattern.errors import ConfigError, InvalidArgumentError, OptimizationError, SamplingError
from reidpattern.imagecore import Mask, Pattern, make_mask, total_variation
from reidpattern.physicsim import DegradeParams
from reidpattern.reid import embed, embed_batch, score_from_embeddings, similarity

FIXED_DEGRADE = DegradeParams((0.8, 0.8), (0.7, 0.7))


def random_delta(seed, shape=(8, 8)):
    return Pattern(np.random.default_rng(seed).uniform(0.1, 0.85, shape + (3,)))


def adv_np(entry, delta, mask=None, degradation=None):
    if mask is None:
        mask = make_mask(*delta.shape)
    dt = torch.from_numpy(delta.pixels)
    return adversarial_image(entry, dt, mask, degradation).numpy()


def triplet_of(gs):
    e = gs.entries
    return Triplet(e[0], e[1], e[2])


def fd_fraction(loss_fn, delta, n_pixels, step=1e-4, seed=0):
    _, g = loss_fn(delta)
    rng = np.random.default_rng(seed)
    flat = rng.choice(delta.pixels.size, n_pixels, replace=False)
    ok = 0
    for f in flat:
        idx = np.unravel_index(f, delta.pixels.shape)
        p, m = delta.pixels.copy(), delta.pixels.copy()
        p[idx] += step
        m[idx] -= step
        fd = (loss_fn(delta.with_pixels(p))[0] - loss_fn(delta.with_pixels(m))[0]) / (2 * step)
        ok += abs(fd - g[idx]) <= 1e-2 * max(abs(fd), abs(g[idx])) + 1e-9
    return ok / n_pixels


# --- generating set and sampling


def test_generating_set_counts():
    raw = random_entries(np.random.default_rng(0), cameras=(1, 1, 1, 2, 2, 2))
    gs = build_generating_set(raw, 4, np.random.default_rng(1))
    assert len(gs) == 30
    assert sum(e.provenance == "original" for e in gs.entries) == 6
    assert gs.camera_count == 2 and gs.identity == 7


def test_generating_set_without_augmentation_is_identity():
    raw = random_entries(np.random.default_rng(0))
    gs = build_generating_set(raw, 0)
    assert [e.image is r.image for e, r in zip(gs.entries, raw)] == [True] * 4


def test_generating_set_is_deterministic():
    raw = random_entries(np.random.default_rng(0))
    a = build_generating_set(raw, 3, np.random.default_rng(5))
    b = build_generating_set(raw, 3, np.random.default_rng(5))
    for x, y in zip(a.entries, b.entries):
        assert np.array_equal(x.image, y.image) and x.quad == y.quad and x.position == y.position


def test_generating_set_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        build_generating_set(random_entries(rng, cameras=(1, 1)), 0)
    mixed = random_entries(rng) + random_entries(rng, identity=8)
    with pytest.raises(ConfigError):
        build_generating_set(mixed, 0)
    with pytest.raises(ConfigError):
        GeneratingSet([])


def test_sample_triplet_reaches_every_valid_triplet(tiny_gs):
    e = tiny_gs.entries
    oracle = {(a, p, n) for a, p, n in itertools.permutations(range(4), 3)
              if e[a].camera == e[p].camera != e[n].camera}
    assert len(oracle) == 8
    rng = np.random.default_rng(0)
    index = {id(x): i for i, x in enumerate(e)}
    seen = set()
    for _ in range(400):
        t = sample_triplet(tiny_gs, rng)
        seen.add((index[id(t.anchor)], index[id(t.positive)], index[id(t.negative)]))
    assert seen == oracle


def test_sample_triplet_is_reproducible(tiny_gs):
    def draw(seed):
        rng = np.random.default_rng(seed)
        return [tuple(id(x) for x in (t.anchor, t.positive, t.negative))
                for t in (sample_triplet(tiny_gs, rng) for _ in range(20))]

    assert draw(3) == draw(3)


def test_sample_triplet_needs_a_repeated_camera():
    gs = GeneratingSet(random_entries(np.random.default_rng(0), cameras=(1, 2, 3)))
    with pytest.raises(SamplingError):
        sample_triplet(gs, np.random.default_rng(0))


def test_triplet_invariants():
    e = random_entries(np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        Triplet(e[0], e[2], e[3])


def test_sample_quadruplet_needs_targets(tiny_gs):
    with pytest.raises(ConfigError):
        sample_quadruplet(tiny_gs, [], np.random.default_rng(0))


# --- pairwise objective


def test_pairwise_two_images_is_twice_the_score(tiny_model64):
    gs = GeneratingSet(random_entries(np.random.default_rng(2), cameras=(1, 2)))
    delta = random_delta(0)
    loss, _ = pairwise_objective(gs, delta, tiny_model64)
    x1, x2 = (adv_np(e, delta) for e in gs.entries)
    assert loss == pytest.approx(2 * similarity(tiny_model64, x1, x2), abs=1e-9)


def test_pairwise_counts_only_cross_camera_pairs(tiny_model64, tiny_gs):
    delta = random_delta(1)
    loss, _ = pairwise_objective(tiny_gs, delta, tiny_model64)
    imgs = [adv_np(e, delta) for e in tiny_gs.entries]
    e = embed_batch(tiny_model64, imgs)
    cams = [x.camera for x in tiny_gs.entries]
    expected = sum(score_from_embeddings(e[i], e[j]) for i in range(4) for j in range(4) if cams[i] != cams[j])
    assert loss == pytest.approx(expected, abs=1e-9)


def test_pairwise_alpha_zero_equals_evade(tiny_model64, tiny_gs):
    delta = random_delta(2)
    targets = [np.random.default_rng(3).uniform(size=(32, 16, 3))]
    ev, gev = pairwise_objective(tiny_gs, delta, tiny_model64, "evade")
    im, gim = pairwise_objective(tiny_gs, delta, tiny_model64, "impersonate", alpha=0.0, targets=targets)
    assert abs(ev - im) <= 1e-9
    np.testing.assert_allclose(gim, gev, atol=1e-9)


def test_pairwise_impersonation_needs_targets(tiny_model64, tiny_gs):
    with pytest.raises(ConfigError):
        pairwise_objective(tiny_gs, random_delta(0), tiny_model64, "impersonate")
    with pytest.raises(ConfigError):
        pairwise_objective(tiny_gs, random_delta(0), tiny_model64, "dodge")


def test_pairwise_gradient_matches_finite_differences(tiny_model64, tiny_gs):
    delta = random_delta(4)
    assert fd_fraction(lambda d: pairwise_objective(tiny_gs, d, tiny_model64), delta, 20) >= 0.95


# --- triplet and robust objectives


def test_robust_evading_reduces_to_triplet(tiny_model64, tiny_gs):
    t, delta = triplet_of(tiny_gs), random_delta(5)
    tri, gtri = triplet_evading_loss(t, delta, tiny_model64, beta=0.5)
    rob, grob = robust_evading_loss(t, delta, None, tiny_model64, beta=0.5, kappa=0.0,
                                    degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    assert abs(tri - rob) <= 1e-9
    np.testing.assert_allclose(grob, gtri, atol=1e-9)


def test_robust_evading_beta_zero_is_negative_term(tiny_model64, tiny_gs):
    t, delta = triplet_of(tiny_gs), random_delta(6)
    loss, _ = robust_evading_loss(t, delta, None, tiny_model64, beta=0.0, kappa=0.0,
                                  degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    assert loss == pytest.approx(similarity(tiny_model64, adv_np(t.anchor, delta), adv_np(t.negative, delta)),
                                 abs=1e-9)


def test_tv_term_vanishes_for_constant_pattern(tiny_model64, tiny_gs):
    t = triplet_of(tiny_gs)
    delta = Pattern(np.full((8, 8, 3), 0.4))
    kw = dict(degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    a, ga = robust_evading_loss(t, delta, None, tiny_model64, kappa=0.0, **kw)
    b, gb = robust_evading_loss(t, delta, None, tiny_model64, kappa=1e3, **kw)
    assert a == b
    np.testing.assert_array_equal(ga, gb)


def test_robust_evading_includes_tv_penalty(tiny_model64, tiny_gs):
    t, delta = triplet_of(tiny_gs), random_delta(7)
    kw = dict(degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    a, _ = robust_evading_loss(t, delta, None, tiny_model64, kappa=0.0, **kw)
    b, _ = robust_evading_loss(t, delta, None, tiny_model64, kappa=0.5, **kw)
    assert b - a == pytest.approx(0.5 * total_variation(delta)[0], abs=1e-9)


def test_robust_impersonation_subtracts_tv(tiny_model64, tiny_gs):
    q = Quadruplet(triplet_of(tiny_gs), np.random.default_rng(8).uniform(size=(32, 16, 3)))
    delta = random_delta(8)
    kw = dict(degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    a, _ = robust_impersonation_loss(q, delta, None, tiny_model64, kappa=0.0, **kw)
    b, _ = robust_impersonation_loss(q, delta, None, tiny_model64, kappa=0.5, **kw)
    assert a - b == pytest.approx(0.5 * total_variation(delta)[0], abs=1e-9)


def test_impersonation_term_elimination(tiny_model64, tiny_gs):
    target = np.random.default_rng(9).uniform(size=(32, 16, 3))
    q = Quadruplet(triplet_of(tiny_gs), target)
    delta = random_delta(9)
    obj, _ = robust_impersonation_loss(q, delta, None, tiny_model64, lambda1=0.0, lambda2=0.0, kappa=0.0,
                                       degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    assert obj == pytest.approx(similarity(tiny_model64, adv_np(q.triplet.anchor, delta), target), abs=1e-9)


def test_robust_impersonation_reduces_to_quadruplet(tiny_model64, tiny_gs):
    q = Quadruplet(triplet_of(tiny_gs), np.random.default_rng(10).uniform(size=(32, 16, 3)))
    delta = random_delta(10)
    a, ga = quadruplet_impersonation_objective(q, delta, tiny_model64)
    b, gb = robust_impersonation_loss(q, delta, None, tiny_model64, kappa=0.0,
                                      degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    assert abs(a - b) <= 1e-9
    np.testing.assert_allclose(gb, ga, atol=1e-9)


def test_target_equal_to_adversarial_anchor_scores_one(tiny_model64, tiny_gs):
    t, delta = triplet_of(tiny_gs), random_delta(11)
    q = Quadruplet(t, adv_np(t.anchor, delta))
    obj, _ = robust_impersonation_loss(q, delta, None, tiny_model64, lambda1=0.0, lambda2=0.0, kappa=0.0,
                                       degrade_params=DegradeParams.identity(), rng=np.random.default_rng(0))
    assert obj == pytest.approx(1.0, abs=1e-6)


def test_robust_losses_consume_rng_deterministically(tiny_model64, tiny_gs):
    t, delta = triplet_of(tiny_gs), random_delta(12)
    a = robust_evading_loss(t, delta, None, tiny_model64, degrade_params=DegradeParams(), rng=np.random.default_rng(4))
    b = robust_evading_loss(t, delta, None, tiny_model64, degrade_params=DegradeParams(), rng=np.random.default_rng(4))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_robust_gradients_match_finite_differences(tiny_model64, tiny_gs):
    t, delta = triplet_of(tiny_gs), random_delta(13)
    q = Quadruplet(t, np.random.default_rng(13).uniform(size=(32, 16, 3)))
    ev = lambda d: robust_evading_loss(t, d, None, tiny_model64, degrade_params=FIXED_DEGRADE,
                                       rng=np.random.default_rng(0))
    im = lambda d: robust_impersonation_loss(q, d, None, tiny_model64, degrade_params=FIXED_DEGRADE,
                                             rng=np.random.default_rng(0))
    assert fd_fraction(ev, delta, 20) >= 0.95
    assert fd_fraction(im, delta, 20) >= 0.95


def test_mask_shape_must_match(tiny_model64, tiny_gs):
    with pytest.raises(InvalidArgumentError):
        triplet_evading_loss(triplet_of(tiny_gs), random_delta(0), tiny_model64, mask=make_mask(4, 4))


# --- masking and overlay invariants


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_masked_out_pixels_never_reach_the_image(seed):
    rng = np.random.default_rng(seed)
    (entry,) = random_entries(rng, cameras=(1,))
    raw = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    raw[0, 0] = 1.0
    mask = Mask(raw)
    a = rng.uniform(0.1, 0.85, (8, 8, 3))
    b = a.copy()
    off = raw == 0
    b[off] = rng.uniform(0.1, 0.85, (int(off.sum()), 3))
    for degradation in (None, (rng.uniform(0.7, 1.3), rng.uniform(0.0, 1.2))):
        xa = adv_np(entry, Pattern(a), mask, degradation)
        xb = adv_np(entry, Pattern(b), mask, degradation)
        assert xa.tobytes() == xb.tobytes()


def test_pixels_outside_coverage_are_original(tiny_gs):
    entry = tiny_gs.entries[0]
    delta = random_delta(14)
    mask = make_mask(8, 8)
    out = adv_np(entry, delta, mask)
    cov = entry.plan((8, 8)).coverage(mask) >= 0.5
    assert cov.any() and not cov.all()
    assert out[~cov].tobytes() == entry.image[~cov].tobytes()


# --- optimizer


def test_adam_matches_hand_computed_first_step():
    opt = Adam(lr=0.1)
    x = opt.step(np.array([1.0, -2.0]), np.array([0.5, -3.0]))
    # bias-corrected first step moves each coordinate by lr * sign(grad)
    np.testing.assert_allclose(x, [0.9, -1.9], atol=1e-7)


def test_adam_minimizes_quadratic():
    opt, x = Adam(lr=0.05), np.array([3.0, -4.0])
    for _ in range(500):
        x = opt.step(x, 2 * x)
    assert np.abs(x).max() < 1e-2


def test_zero_iterations_returns_midpoint(tiny_model64, tiny_gs):
    cfg = AttackConfig(max_iterations=0, pattern_height=8, pattern_width=8)
    pattern, trace = optimize_pattern(tiny_gs, tiny_model64, cfg)
    np.testing.assert_array_equal(pattern.pixels, Pattern.midpoint(8, 8).pixels)
    assert trace.rows == []


@pytest.mark.parametrize("stage", ["pairwise", "triplet", "robust"])
@pytest.mark.parametrize("mode", ["evade", "impersonate"])
def test_pattern_stays_in_interval_every_iteration(tiny_model, tiny_gs, stage, mode):
    cfg = AttackConfig(mode=mode, stage=stage, max_iterations=15, learning_rate=0.2, pattern_height=8,
                       pattern_width=8)
    targets = [np.random.default_rng(0).uniform(size=(32, 16, 3))] if mode == "impersonate" else None
    seen = []

    def check(it, p):
        assert p.within_interval()
        assert p.pixels.min() >= cfg.lower and p.pixels.max() <= cfg.upper
        seen.append(it)

    _, trace = optimize_pattern(tiny_gs, tiny_model, cfg, targets=targets, callback=check)
    assert seen == list(range(1, 16)) and len(trace.rows) == 15


def test_optimization_is_deterministic(tiny_model, tiny_gs):
    cfg = AttackConfig(max_iterations=10, pattern_height=8, pattern_width=8, seed=3)
    p1, t1 = optimize_pattern(tiny_gs, tiny_model, cfg)
    p2, t2 = optimize_pattern(tiny_gs, tiny_model, cfg)
    assert p1.pixels.tobytes() == p2.pixels.tobytes()
    assert t1.to_csv() == t2.to_csv()


def test_trace_csv_layout(tiny_model, tiny_gs):
    cfg = AttackConfig(max_iterations=3, pattern_height=8, pattern_width=8)
    _, trace = optimize_pattern(tiny_gs, tiny_model, cfg)
    lines = trace.to_csv().splitlines()
    assert lines[0] == "iteration,loss,grad_norm" and len(lines) == 4
    assert [int(line.split(",")[0]) for line in lines[1:]] == [1, 2, 3]


def test_non_finite_loss_raises_with_iteration(tiny_model, tiny_gs):
    for e in tiny_gs.entries:
        e.image = np.full_like(e.image, np.nan)
    cfg = AttackConfig(max_iterations=5, pattern_height=8, pattern_width=8, mask_kind="ellipse")
    with pytest.raises(OptimizationError) as info:
        optimize_pattern(tiny_gs, tiny_model, cfg)
    assert info.value.iteration == 1


def test_impersonation_requires_targets(tiny_model, tiny_gs):
    with pytest.raises(ConfigError):
        optimize_pattern(tiny_gs, tiny_model, AttackConfig(mode="impersonate", max_iterations=1))


@pytest.mark.parametrize("kw", [dict(mode="x"), dict(stage="x"), dict(beta=-1), dict(rank_k=0),
                                dict(lower=0.9, upper=0.1), dict(learning_rate=0), dict(adam_beta1=1.0),
                                dict(max_iterations=-1), dict(pattern_height=0)])
def test_attack_config_validation(kw):
    with pytest.raises(ConfigError):
        AttackConfig(**kw)


# --- end-to-end on the toy setup


@pytest.mark.slow
def test_evade_loss_decreases(evade_run):
    losses = evade_run.trace.losses
    assert len(losses) == 700
    assert losses[-50:].mean() < losses[:50].mean()


@pytest.mark.slow
def test_evade_lowers_cross_camera_self_similarity(evade_run):
    table = evade_run.tables["testing"]
    assert table.row("attacked/self").ss < table.row("clean/self").ss


@pytest.mark.slow
def test_impersonation_raises_target_similarity(impersonate_run, toy_model):
    gs, pattern = impersonate_run.gs, impersonate_run.pattern
    mask = make_mask(*pattern.shape)
    originals = [e for e in gs.entries if e.provenance == "original"]
    clean = embed_batch(toy_model, [e.image for e in originals])
    attacked = embed_batch(toy_model, [adv_np(e, pattern, mask) for e in originals])
    tgt = embed_batch(toy_model, impersonate_run.targets)
    before = score_from_embeddings(clean[:, None], tgt[None]).mean()
    after = score_from_embeddings(attacked[:, None], tgt[None]).mean()
    assert after > before
