import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from mdseg import evalkit
from mdseg.evalkit import UndefinedMetric

from .oracles import brute_metrics, brute_surface


def _random_mask(rng, shape=(16, 16, 16)):
    noise = ndimage.gaussian_filter(rng.normal(size=shape), sigma=rng.uniform(1.0, 2.5))
    mask = noise > np.quantile(noise, rng.uniform(0.6, 0.95))
    if not mask.any():
        mask[tuple(rng.integers(0, 16, 3))] = True
    return mask


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(2024)
    return [(_random_mask(rng), _random_mask(rng), tuple(rng.uniform(0.3, 2.0, 3))) for _ in range(100)]


def test_cube_surface_count():
    m = np.zeros((6, 6, 6), bool)
    m[1:5, 1:5, 1:5] = True
    assert evalkit.surface_voxels(m).sum() == 4 ** 3 - 2 ** 3


def test_volume_border_counts_as_background():
    m = np.ones((3, 3, 3), bool)
    assert evalkit.surface_voxels(m).sum() == 26


def test_surface_matches_brute_force(pairs):
    for gt, _, _ in pairs[:20]:
        assert np.array_equal(evalkit.surface_voxels(gt), brute_surface(gt))


def test_metrics_match_brute_force(pairs):
    for gt, p, spacing in pairs:
        ref = brute_metrics(gt, p, spacing)
        assert evalkit.dice(gt, p) == ref["dice"]
        assert evalkit.sensitivity(gt, p) == ref["sensitivity"]
        assert evalkit.specificity(gt, p) == ref["specificity"]
        assert evalkit.ravd(gt, p) == ref["ravd"]
        mssd, assd = evalkit.surface_distances(gt, p, spacing)
        assert abs(mssd - ref["mssd"]) <= 1e-9
        assert abs(assd - ref["assd"]) <= 1e-9


def test_spacing_covariance(pairs):
    for gt, p, spacing in pairs[:20]:
        base = np.array(evalkit.surface_distances(gt, p, spacing))
        scaled = np.array(evalkit.surface_distances(gt, p, tuple(2.5 * s for s in spacing)))
        assert np.allclose(scaled, 2.5 * base, rtol=1e-12, atol=1e-12)
        perm = (2, 0, 1)
        moved = evalkit.surface_distances(gt.transpose(perm), p.transpose(perm), tuple(spacing[i] for i in perm))
        assert np.allclose(moved, base, rtol=1e-12, atol=1e-12)


def test_identical_masks():
    rng = np.random.default_rng(0)
    m = _random_mask(rng)
    assert evalkit.dice(m, m) == 1.0
    assert evalkit.surface_distances(m, m) == (0.0, 0.0)
    assert evalkit.ravd(m, m) == 0.0


def test_degenerate_cases():
    empty = np.zeros((4, 4, 4), bool)
    full = np.ones((4, 4, 4), bool)
    assert evalkit.dice_flagged(empty, empty) == (1.0, True)
    with pytest.raises(UndefinedMetric):
        evalkit.sensitivity(empty, full)
    with pytest.raises(UndefinedMetric):
        evalkit.specificity(full, full)
    with pytest.raises(UndefinedMetric):
        evalkit.ravd(empty, full)
    with pytest.raises(UndefinedMetric):
        evalkit.surface_distances(empty, full)
    row = evalkit.structure_metrics(empty, empty, name="x")
    assert row.dice == 1.0 and row.sensitivity is None and "dice_both_empty" in row.flags


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_metric_ranges(seed):
    rng = np.random.default_rng(seed)
    gt, p = _random_mask(rng, (10, 10, 10)), _random_mask(rng, (10, 10, 10))
    assert 0.0 <= evalkit.dice(gt, p) <= 1.0
    assert evalkit.dice(gt, p) == evalkit.dice(p, gt)
    mssd, assd = evalkit.surface_distances(gt, p)
    assert 0.0 <= assd <= mssd
    assert evalkit.surface_distances(p, gt) == pytest.approx((mssd, assd))


def _probs_from_labels(labels, n_classes, rng):
    p = rng.uniform(0, 0.2, size=(labels.shape[0], n_classes) + labels.shape[1:])
    for c in range(n_classes):
        p[:, c][labels == c] += 1.0
    return p / p.sum(1, keepdims=True)


def test_postprocess_keeps_largest_component_and_closes():
    rng = np.random.default_rng(1)
    lab = np.zeros((12, 20, 20), int)
    lab[2:10, 3:12, 3:12] = 1
    lab[5, 6, 6] = 0  # hole that closing fills
    lab[1, 17, 17] = 1  # stray island
    out = evalkit.postprocess(_probs_from_labels(lab, 2, rng))
    assert out.labels[1, 17, 17] == 0
    assert out.labels[5, 6, 6] == 1
    assert ndimage.label(out.labels == 1, structure=np.ones((3, 3, 3)))[1] == 1


def test_postprocess_idempotent_on_clean_blob():
    rng = np.random.default_rng(2)
    zz, yy, xx = np.mgrid[:16, :16, :16]
    ball = ((zz - 8) ** 2 + (yy - 8) ** 2 + (xx - 8) ** 2) <= 25
    out = evalkit.postprocess(_probs_from_labels(ball.astype(int), 2, rng))
    assert np.array_equal(out.labels == 1, ball)


@pytest.mark.parametrize("winner", [1, 2])
def test_postprocess_overlap_goes_to_higher_probability(winner):
    lab = np.zeros((10, 10, 10), int)
    lab[2:8, 2:8, 2:8] = 1
    lab[4, 4, 4] = 2  # a one-voxel hole in structure 1, filled by its closing
    probs = np.zeros((10, 3, 10, 10))
    for c in range(3):
        probs[:, c][lab == c] = 0.8
    probs[:, 1 if winner == 2 else 2][lab == 0] = 0.1
    probs[4, :, 4, 4] = [0.1, 0.3, 0.6] if winner == 2 else [0.1, 0.45, 0.45 - 1e-3]
    out = evalkit.postprocess(probs, labels=lab)
    assert out.labels[4, 4, 4] == winner
    assert (out.labels == 1).sum() == 6 ** 3 - 1 + (winner == 1)


def test_postprocess_flags_empty_structures():
    probs = np.zeros((4, 3, 8, 8))
    probs[:, 0] = 1.0
    probs[1:3, 1, 2:5, 2:5] = 2.0
    out = evalkit.postprocess(probs)
    assert out.empty_structures == [2]


def test_kernel_is_radius_two_ball():
    k = evalkit.spherical_kernel(2)
    assert k.shape == (5, 5, 5)
    assert k.sum() == sum(1 for o in itertools.product(range(-2, 3), repeat=3) if sum(v * v for v in o) <= 4)


def test_ks_against_scipy():
    from scipy import stats

    rng = np.random.default_rng(3)
    a, b = rng.normal(size=200), rng.normal(0.3, 1.2, size=150)
    d, p = evalkit.ks_two_sample(a, b)
    ref = stats.ks_2samp(a, b)
    assert d == pytest.approx(ref.statistic, abs=1e-12)
    en = len(a) * len(b) / (len(a) + len(b))
    assert p == pytest.approx(stats.kstwobign.sf(np.sqrt(en) * d), rel=1e-9)
    assert evalkit.ks_two_sample(a, a)[0] == 0.0


def test_evaluate_labels_report():
    rng = np.random.default_rng(4)
    gt = np.zeros((8, 8, 8), np.uint8)
    gt[2:6, 2:6, 2:6] = 1
    pred = gt.copy()
    pred[2, 2, 2] = 0
    rep = evalkit.evaluate_labels(gt, pred, (1, 1, 1), ("bg", "a", "b"), "v", 0)
    d = rep.as_dict()
    assert d["structures"][0]["dice"] == pytest.approx(2 * 63 / 127)
    assert d["structures"][1]["dice"] == 1.0 and rep.flagged
    assert rep.mean()["sensitivity"] == pytest.approx(63 / 64)
