import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reidpattern.errors import InvalidArgumentError
from reidpattern.imagecore import (Mask, Pattern, check_image, load_pattern, make_mask, project_interval,
                                   save_pattern, total_variation)


def tv_oracle(d):
    """Direct double loop over pixels and channels."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 2:
        d = d[:, :, None]
    h, w, c = d.shape
    total = 0.0
    for ch in range(c):
        for p in range(h):
            for q in range(w):
                dv = d[p, q, ch] - d[p + 1, q, ch] if p + 1 < h else 0.0
                dh = d[p, q, ch] - d[p, q + 1, ch] if q + 1 < w else 0.0
                total += np.sqrt(dv * dv + dh * dh)
    return total


def central_difference(f, x, idx, step=1e-5):
    xp, xm = x.copy(), x.copy()
    xp[idx] += step
    xm[idx] -= step
    return (f(xp) - f(xm)) / (2 * step)


# --- images, patterns, masks


def test_check_image_accepts_valid_raster():
    x = np.full((8, 8, 3), 0.5)
    assert check_image(x) is not None


@pytest.mark.parametrize("shape", [(7, 8, 3), (8, 7, 3), (8, 8), (8, 8, 4)])
def test_check_image_rejects_bad_shapes(shape):
    with pytest.raises(InvalidArgumentError):
        check_image(np.zeros(shape))


@pytest.mark.parametrize("value", [-0.01, 1.01, np.nan])
def test_check_image_rejects_out_of_range(value):
    x = np.full((8, 8, 3), 0.5)
    x[3, 3, 1] = value
    with pytest.raises(InvalidArgumentError):
        check_image(x)


def test_pattern_interval_validation():
    with pytest.raises(InvalidArgumentError):
        Pattern(np.zeros((2, 2, 3)), 0.5, 0.5)
    with pytest.raises(InvalidArgumentError):
        Pattern(np.zeros((2, 2, 3)), -0.1, 0.5)
    with pytest.raises(InvalidArgumentError):
        Pattern(np.zeros((0, 2, 3)))


def test_pattern_midpoint():
    p = Pattern.midpoint(4, 5, 0.1, 0.85)
    assert p.shape == (4, 5)
    assert np.all(p.pixels == pytest.approx(0.475))


def test_mask_must_be_binary_and_nonempty():
    with pytest.raises(InvalidArgumentError):
        Mask(np.zeros((3, 3)))
    with pytest.raises(InvalidArgumentError):
        Mask(np.full((3, 3), 0.5))
    assert Mask(np.eye(3)).shape == (3, 3)


@pytest.mark.parametrize("kind", ["full", "ellipse", "shield"])
def test_make_mask_kinds(kind):
    m = make_mask(16, 12, kind)
    assert m.shape == (16, 12)
    assert set(np.unique(m.values)) <= {0.0, 1.0}
    if kind != "full":
        assert m.values[15, 0] == 0 and m.values[8, 6] == 1


def test_make_mask_unknown_kind():
    with pytest.raises(InvalidArgumentError):
        make_mask(4, 4, "star")


# --- total variation


def test_tv_constant_pattern_is_zero():
    tv, grad = total_variation(Pattern(np.full((6, 6, 3), 0.5)))
    assert tv == 0.0
    assert np.all(grad == 0.0)


def test_tv_one_by_two():
    tv, _ = total_variation(np.array([[0.0, 1.0]]))
    assert tv == pytest.approx(1.0, abs=1e-12)


def test_tv_empty_pattern_rejected():
    with pytest.raises(InvalidArgumentError):
        total_variation(np.zeros((0, 3, 3)))


def test_tv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for shape in [(1, 5, 1), (5, 1, 2), (7, 6, 3)]:
        d = rng.uniform(size=shape)
        assert total_variation(d)[0] == pytest.approx(tv_oracle(d), rel=1e-12)


def test_tv_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    d = rng.uniform(0.1, 0.85, (8, 8, 3))
    _, grad = total_variation(d)
    f = lambda x: total_variation(x)[0]
    for idx in np.ndindex(d.shape):
        fd = central_difference(f, d, idx)
        assert abs(fd - grad[idx]) <= 1e-4 * max(abs(fd), abs(grad[idx]), 1e-8)


# --- projection


@pytest.mark.parametrize("value,expected", [(0.95, 0.85), (0.02, 0.1), (0.5, 0.5)])
def test_project_interval_examples(value, expected):
    p = Pattern(np.full((2, 2, 3), value), 0.1, 0.85)
    assert np.all(project_interval(p).pixels == expected)


# --- persistence


def test_pattern_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    p = Pattern(rng.uniform(0.1, 0.85, (5, 7, 3)), 0.1, 0.85)
    m = make_mask(5, 7, "ellipse")
    meta = save_pattern(tmp_path / "pat.png", p, m)
    assert meta["height"] == 5 and meta["width"] == 7
    assert json.loads((tmp_path / "pat.png.json").read_text())["lower"] == [0.1] * 3
    q, m2 = load_pattern(tmp_path / "pat.png")
    assert q.within_interval()
    assert np.max(np.abs(q.pixels - p.pixels)) <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(m2.values, m.values)


def test_load_pattern_projects_after_quantization(tmp_path):
    # 0.85 * 255 = 216.75 rounds up to 217, just above the interval
    p = Pattern(np.full((3, 3, 3), 0.85), 0.1, 0.85)
    save_pattern(tmp_path / "p.png", p)
    q, mask = load_pattern(tmp_path / "p.png")
    assert mask is None
    assert q.within_interval() and np.all(q.pixels == 0.85)


# --- properties

patterns = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)),
                  elements=st.floats(0, 1, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(patterns)
def test_tv_nonnegative_and_zero_iff_constant(d):
    tv, _ = total_variation(d)
    assert tv >= 0
    constant = all(np.all(d[..., c] == d[0, 0, c]) for c in range(d.shape[2]))
    assert (tv == 0) == constant


@settings(max_examples=60, deadline=None)
@given(patterns, st.floats(-0.5, 0.5))
def test_tv_shift_invariant(d, shift):
    assert total_variation(d + shift)[0] == pytest.approx(total_variation(d)[0], rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 4, 3), elements=st.floats(-1, 2, allow_nan=False)))
def test_project_is_idempotent(d):
    p = Pattern(d, 0.1, 0.85)
    once = project_interval(p)
    np.testing.assert_array_equal(project_interval(once).pixels, once.pixels)
    assert once.within_interval()
