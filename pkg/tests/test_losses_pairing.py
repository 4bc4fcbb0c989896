import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from popcorn.data import DatasetPool, Mask, Provenance, Sample, Volume
from popcorn.errors import ConfigError, DataError, ShapeError
from popcorn.losses import (PairItem, PairKind, consistency_loss, dice_loss, feature_distance, pair_batch_loss,
                            similarity, single_batch_loss, total_loss)
from popcorn.model import init_model
from popcorn.pairing import (BLUR_TRUNCATE, AugmentConfig, PairPolicy, augment, draw_patch_spec, gaussian_blur,
                             sample_pair)

from conftest import TINY_MODEL

vec = arrays(np.float64, 6, elements=st.floats(-3, 3))


def test_dice_examples():
    y = np.zeros(16)
    y[:8] = 1
    assert dice_loss(y, y) == 0.0
    assert dice_loss(np.ones(16), np.zeros(16)) == pytest.approx(16 / 17, abs=1e-12)
    assert dice_loss(np.zeros(4), np.zeros(4)) == 0.0
    with pytest.raises(ShapeError):
        dice_loss(np.zeros(3), np.zeros(4))


def test_similarity_examples():
    a = np.zeros((4, 4))
    b = a.copy()
    b[:2] = 1
    assert similarity(a, a) == 1.0
    assert similarity(np.ones(9), np.zeros(9)) == pytest.approx(math.exp(-1), abs=1e-12)
    assert similarity(a, b) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_distance_examples():
    assert feature_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert feature_distance([1.0, 0.0], [-1.0, 0.0]) == pytest.approx(4, abs=1e-6)
    assert feature_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(4.0 / (2.0 + 1e-8), abs=1e-15)
    assert feature_distance([0.0, 0.0], [0.0, 0.0]) == 0.0


def test_consistency_examples():
    assert consistency_loss([1.0, 1.0], [1.0, 1.0], np.ones(4), np.ones(4)) == 0.0
    v = consistency_loss([1.0, 0.0], [-1.0, 0.0], np.ones(4), np.zeros(4))
    assert v == pytest.approx(4 * math.exp(-1), abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(vec, vec, st.integers(0, 2 ** 31))
def test_loss_ranges_and_symmetry(h1, h2, seed):
    rng = np.random.default_rng(seed)
    y1 = (rng.uniform(size=6) > 0.5).astype(float)
    y2 = (rng.uniform(size=6) > 0.5).astype(float)
    d = feature_distance(h1, h2)
    assert 0.0 <= d <= 4.0 + 1e-12
    assert d == pytest.approx(feature_distance(h2, h1), abs=1e-12)
    s = similarity(y1, y2)
    assert 0.0 < s <= 1.0 and s == similarity(y2, y1)
    c = consistency_loss(h1, h2, y1, y2)
    assert 0.0 <= c <= d + 1e-15
    assert c == pytest.approx(consistency_loss(h2, h1, y2, y1), abs=1e-12)
    assert 0.0 <= dice_loss(rng.uniform(size=6), y1) <= 1.0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda h: np.linalg.norm(h) >= 1e-2),
       arrays(np.float64, 5, elements=st.floats(-10, 10)).filter(lambda h: np.linalg.norm(h) >= 1e-2),
       st.floats(0.1, 100).flatmap(lambda c: st.sampled_from([c, -c])))
def test_distance_scale_invariance(h1, h2, c):
    assert feature_distance(c * h1, c * h2) == pytest.approx(feature_distance(h1, h2), abs=1e-6)


def _pair(rng, same=False):
    ps = TINY_MODEL.patch_size
    y = (rng.uniform(size=ps) > 0.5).astype(np.uint8)
    x = rng.standard_normal(ps)
    if same:
        return PairItem(x, y, x.copy(), y, PairKind.AUG_SAME)
    return PairItem(x, y, rng.standard_normal(ps), (rng.uniform(size=ps) > 0.5).astype(np.uint8),
                    PairKind.CROSS_IMAGE)


def test_total_loss_decomposition(rng):
    model = init_model(TINY_MODEL, 0)
    from popcorn.model import forward

    for _ in range(5):
        pair = _pair(rng)
        rep = total_loss(model, pair, 0.2)
        pi, hi = forward(model, pair.x_i)
        pj, hj = forward(model, pair.x_j)
        assert rep.seg_i == pytest.approx(dice_loss(pi, pair.y_i), abs=1e-12)
        assert rep.seg_j == pytest.approx(dice_loss(pj, pair.y_j), abs=1e-12)
        assert rep.reg == pytest.approx(consistency_loss(hi, hj, pair.y_i, pair.y_j), abs=1e-12)
        assert rep.total == pytest.approx(rep.seg_i + rep.seg_j + 0.2 * rep.reg, rel=1e-12)
        rep0 = total_loss(model, pair, 0.0)
        assert rep0.total == rep0.seg_i + rep0.seg_j
        swapped = total_loss(model, PairItem(pair.x_j, pair.y_j, pair.x_i, pair.y_i, pair.kind), 0.2)
        assert swapped.total == pytest.approx(rep.total, rel=1e-12)


def test_identical_pair_has_zero_reg(rng):
    model = init_model(TINY_MODEL, 0)
    assert total_loss(model, _pair(rng, same=True), 0.2).reg == 0.0


def test_negative_alpha_rejected(rng):
    with pytest.raises(ValueError):
        total_loss(init_model(TINY_MODEL, 0), _pair(rng), -0.1)


def test_batch_gradient_is_mean_of_items(rng):
    model = init_model(TINY_MODEL, 0)
    pairs = [_pair(rng) for _ in range(3)]
    _, g_all = pair_batch_loss(model, pairs, 0.2)
    singles = [pair_batch_loss(model, [p], 0.2)[1] for p in pairs]
    for k in g_all:
        assert np.allclose(g_all[k], sum(s[k] for s in singles) / 3, atol=1e-12)


def test_single_batch_loss_no_reg(rng):
    model = init_model(TINY_MODEL, 0)
    p = _pair(rng)
    losses, grads = single_batch_loss(model, [(p.x_i, p.y_i)])
    assert losses[0] == pytest.approx(total_loss(model, p, 0.0).seg_i, abs=1e-12)
    assert set(grads) == set(model.params)


# -- augmentation --------------------------------------------------------------


def test_identity_configs(rng):
    x = rng.standard_normal((8, 8))
    assert np.array_equal(augment(x, AugmentConfig(enabled_ops=()), rng), x)
    cfg = AugmentConfig(noise_std_range=(0.0, 0.0), enabled_ops=("noise",))
    assert np.array_equal(augment(x, cfg, rng), x)


def test_blur_impulse_oracle():
    n = 15
    x = np.zeros((n, n))
    x[7, 7] = 1.0
    out = gaussian_blur(x, 1.0)
    # independent oracle: the normalised truncated 1-D kernel, applied separably by direct convolution
    r = int(BLUR_TRUNCATE * 1.0 + 0.5)
    k = np.exp(-0.5 * np.arange(-r, r + 1) ** 2)
    k /= k.sum()
    want = np.zeros((n, n))
    want[7 - r:8 + r, 7 - r:8 + r] = np.outer(k, k)
    assert np.allclose(out, want, atol=1e-15)


def test_augment_preserves_type_shape_and_is_deterministic():
    x = np.random.default_rng(0).standard_normal((8, 8)).astype(np.float32)
    v = Volume(x)
    out = augment(v, AugmentConfig(), np.random.default_rng(1))
    assert isinstance(out, Volume) and out.shape == v.shape and out.voxels.dtype == np.float32
    again = augment(v, AugmentConfig(), np.random.default_rng(1))
    assert np.array_equal(out.voxels, again.voxels)
    assert np.array_equal(v.voxels, x)


def test_augment_scale_only_is_pointwise(rng):
    x = rng.standard_normal((6, 6))
    cfg = AugmentConfig(intensity_scale_range=(2.0, 2.0), enabled_ops=("scale",))
    assert np.array_equal(augment(x, cfg, rng), 2.0 * x)


def test_augment_config_errors():
    with pytest.raises(ConfigError):
        AugmentConfig(blur_sigma_range=(1.0, 0.5)).validate()
    with pytest.raises(ValueError):
        AugmentConfig(enabled_ops=("rotate",))
    with pytest.raises(ConfigError):
        PairPolicy(aug_same_fraction=1.5).validate()


def _pool(n):
    rng = np.random.default_rng(0)
    t = [Sample(f"s{k}", Volume(rng.standard_normal((24, 24))), Mask((rng.uniform(size=(24, 24)) > 0.7)
                                                                   .astype(np.uint8)), Provenance.LABELED)
         for k in range(n)]
    return DatasetPool(t, [])


def test_aug_same_shares_labels(rng):
    pool = _pool(3)
    for _ in range(20):
        p = sample_pair(pool, PairPolicy(aug_same_fraction=1.0), AugmentConfig(), (16, 16), rng)
        assert p.kind is PairKind.AUG_SAME and p.y_i is p.y_j
        assert similarity(p.y_i, p.y_j) == 1.0


def test_cross_image_same_region(rng):
    pool = _pool(2)
    for _ in range(20):
        p = sample_pair(pool, PairPolicy(aug_same_fraction=0.0), AugmentConfig(), (16, 16), rng)
        assert p.kind is PairKind.CROSS_IMAGE and p.spec_i == p.spec_j
        # masks are untouched crops of the sources
        src = {s.id: s for s in pool.training}
        crops = [s.mask.voxels[p.spec_i.slices()] for s in src.values()]
        assert any(np.array_equal(p.y_i, c) for c in crops) and any(np.array_equal(p.y_j, c) for c in crops)


def test_cross_image_falls_back_with_one_sample(rng):
    p = sample_pair(_pool(1), PairPolicy(aug_same_fraction=0.0), AugmentConfig(), (16, 16), rng)
    assert p.kind is PairKind.AUG_SAME


def test_aug_same_frequency():
    rng = np.random.default_rng(2024)
    pool = _pool(4)
    cfg = AugmentConfig(enabled_ops=())
    n_same = sum(sample_pair(pool, PairPolicy(0.5), cfg, (8, 8), rng).kind is PairKind.AUG_SAME
                 for _ in range(10000))
    assert 0.47 <= n_same / 10000 <= 0.53


def test_grid_positioning(rng):
    for _ in range(20):
        spec = draw_patch_spec((40, 32), (16, 16), "grid", rng)
        assert spec.origin[0] in (0, 16, 24) and spec.origin[1] in (0, 16)
    with pytest.raises(DataError):
        draw_patch_spec((8, 8), (16, 16), "random", rng)
    with pytest.raises(DataError):
        sample_pair(DatasetPool([], []), PairPolicy(), AugmentConfig(), (8, 8), rng)
