import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dorar.core import (BackgroundSampler, HardMask, Sample, SoftMask, build_unit_grid,
                        compose_masked_input, expand_mask, expand_unit_scores, gaussian_kernel,
                        sample_background)


def test_mnist_chunk_grid(mnist_grid):
    assert mnist_grid.num_units == 49
    assert mnist_grid.layout == (7, 7)
    assert mnist_grid.unit_size == 16


def test_pixel_and_sequence_grids():
    assert build_unit_grid((1, 28, 28), (1, 1)).num_units == 784
    assert build_unit_grid((3, 32, 32), (2, 2)).num_units == 256
    seq = build_unit_grid((2, 160), (4,))
    assert seq.num_units == 40
    assert seq.unit_to_features(36).tolist() == [144, 145, 146, 147, 304, 305, 306, 307]


def test_indivisible_unit_names_dimension():
    with pytest.raises(ValueError, match="dimension 1"):
        build_unit_grid((1, 28, 28), (5, 4))
    with pytest.raises(ValueError, match="dimension 2"):
        build_unit_grid((1, 28, 28), (4, 5))
    with pytest.raises(ValueError):
        build_unit_grid((1, 28, 28), (4,))


def test_unit_to_features_row_major(mnist_grid):
    feats = mnist_grid.unit_to_features(8)  # second row of units, second column
    rows, cols = np.unravel_index(feats, (28, 28))
    assert set(rows) == {4, 5, 6, 7} and set(cols) == {4, 5, 6, 7}
    with pytest.raises(IndexError):
        mnist_grid.unit_to_features(49)


def test_units_partition_features():
    grid = build_unit_grid((3, 8, 8), (2, 4))
    all_feats = np.concatenate([grid.unit_to_features(u) for u in range(grid.num_units)])
    assert sorted(all_feats.tolist()) == list(range(3 * 64))


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([(1, 1), (2, 2), (4, 4), (2, 4)]), st.integers(0, 2**31 - 1))
def test_expand_mask_matches_batched_expansion(unit, seed):
    grid = build_unit_grid((2, 8, 8), unit)
    rng = np.random.default_rng(seed)
    scores = rng.random(grid.num_units)
    dense = expand_mask(SoftMask(scores), grid)
    batched = expand_unit_scores(torch.tensor(scores[None]), grid)[0].numpy()
    np.testing.assert_array_equal(dense, batched)
    for u in range(grid.num_units):
        np.testing.assert_array_equal(dense.ravel()[grid.unit_to_features(u)], scores[u])


def test_masks_validate():
    with pytest.raises(ValueError):
        SoftMask(np.array([0.2, 1.5]))
    with pytest.raises(ValueError):
        SoftMask(np.array([np.nan]))
    with pytest.raises(ValueError):
        HardMask(frozenset({3}), 3)
    m = HardMask({0, 2}, 3)
    assert m.n_e == 2 and m.dense().tolist() == [1, 0, 1]


def test_expand_mask_rejects_wrong_unit_count(mnist_grid):
    with pytest.raises(ValueError):
        expand_mask(HardMask({0}, 48), mnist_grid)


def test_sample_validates_range():
    Sample(0, np.zeros((1, 4, 4)), 3)
    with pytest.raises(ValueError):
        Sample(0, np.full((1, 4, 4), 1.2), 3)
    with pytest.raises(ValueError):
        Sample(0, np.zeros((1, 4, 4)), 10)


def test_compose_shape_mismatch():
    with pytest.raises(ValueError):
        compose_masked_input(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((1, 4, 3)))
    full = compose_masked_input(np.ones((2, 3)), np.ones((2, 3)), np.zeros((2, 3)))
    assert (full == 1).all()


def test_empirical_background_draws_per_feature_marginals():
    pool = np.zeros((4, 1, 2, 2))
    pool[:, 0, 0, 0] = [0.1, 0.2, 0.3, 0.4]
    pool[:, 0, 1, 1] = 0.9
    sampler = BackgroundSampler(pool, "empirical")
    draws = sampler.sample(2000, torch.Generator().manual_seed(0))
    np.testing.assert_allclose(np.sort(draws[:, 0, 0, 0].unique().numpy()), [0.1, 0.2, 0.3, 0.4], rtol=1e-6)
    assert (draws[:, 0, 1, 1] == 0.9).all() and (draws[:, 0, 0, 1] == 0).all()
    counts = np.bincount(np.round(draws[:, 0, 0, 0].numpy() * 10).astype(int), minlength=5)[1:]
    assert np.all(np.abs(counts / 2000 - 0.25) < 0.04)


def test_constant_pool_background_is_that_constant():
    pool = np.full((5, 1, 3, 3), 0.37, dtype=np.float32)
    e = sample_background(BackgroundSampler(pool), (1, 3, 3), 42)
    np.testing.assert_allclose(e, 0.37, rtol=0, atol=1e-7)


def test_background_modes():
    pool = np.random.default_rng(0).random((10, 1, 12, 12)).astype(np.float32)
    s = BackgroundSampler(pool, "mean")
    np.testing.assert_allclose(s.sample(2)[0].numpy(), pool.mean(0), atol=1e-6)
    assert (BackgroundSampler(pool, "zero").sample(3) == 0).all()
    blur = BackgroundSampler(pool, "gaussian-blur")
    x = torch.full((1, 1, 12, 12), 0.5)
    np.testing.assert_allclose(blur.sample(1, x=x).numpy(), 0.5, atol=1e-6)
    with pytest.raises(ValueError):
        blur.sample(1)
    with pytest.raises(ValueError):
        BackgroundSampler(pool, "uniform")
    with pytest.raises(ValueError):
        BackgroundSampler(np.zeros((0, 1, 2, 2)))
    with pytest.raises(ValueError):
        sample_background(s, (1, 4, 4), 0)


def test_background_deterministic_given_seed():
    pool = np.random.default_rng(1).random((50, 1, 4, 4))
    s = BackgroundSampler(pool)
    a = sample_background(s, (1, 4, 4), 7)
    b = sample_background(s, (1, 4, 4), 7)
    np.testing.assert_array_equal(a, b)


def test_gaussian_kernel_normalized():
    k = gaussian_kernel(11, 5)
    assert k.shape == (11, 11)
    assert abs(k.sum() - 1) < 1e-12
    assert k[5, 5] == k.max()
