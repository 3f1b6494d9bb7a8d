import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssgan.masking import (
    build_triplet_batch,
    build_triplets,
    make_grid,
    mask_image,
    patch_value,
)


@pytest.mark.parametrize("size,patch", [(64, 16), (32, 8)])
def test_grid_counts(size, patch):
    g = make_grid(size, patch)
    assert len(g.positions) == 16
    assert g.corner_cells == [(0, 0), (0, 3), (3, 0), (3, 3)]
    assert len(g.negative_cells) == 12
    assert not set(g.corner_cells) & set(g.negative_cells)


def test_center_only_negatives():
    g = make_grid(64, 16, "center_only")
    assert g.negative_cells == [(1, 1), (1, 2), (2, 1), (2, 2)]


@pytest.mark.parametrize("size,patch,n", [(64, 8, 8), (64, 32, 2), (32, 16, 2)])
def test_other_patch_sizes(size, patch, n):
    g = make_grid(size, patch)
    assert g.grid_n == n
    assert len(g.negative_cells) == n * n - 4


def test_grid_errors():
    with pytest.raises(ValueError):
        make_grid(64, 12)
    with pytest.raises(ValueError):
        make_grid(64, 64)
    with pytest.raises(ValueError):
        make_grid(64, 32, "center_only")
    with pytest.raises(ValueError):
        make_grid(64, 16, "edges")
    with pytest.raises(IndexError):
        make_grid(64, 16).rect((4, 0))


@pytest.mark.parametrize("size,patch", [(64, 16), (32, 8)])
def test_masked_region_and_outside(size, patch, rng):
    g = make_grid(size, patch)
    x = rng.uniform(-1, 1, (3, size, size))
    means = x.mean(axis=(1, 2))
    for cell in g.positions:
        out = mask_image(x, cell, g)
        rows, cols = g.rect(cell)
        region = out[:, rows, cols]
        for c in range(3):
            assert np.all(np.abs(region[c] - means[c]) < 1e-6)
        keep = np.ones((size, size), bool)
        keep[rows, cols] = False
        assert np.array_equal(out[:, keep], x[:, keep])


def test_cell_zero_geometry(rng):
    g = make_grid(64, 16)
    x = rng.uniform(-1, 1, (3, 64, 64))
    changed = np.any(mask_image(x, (0, 0), g) != x, axis=0)
    assert changed[:16, :16].all()
    assert changed.sum() == 256


def test_constant_image_is_unchanged():
    g = make_grid(32, 8)
    x = np.full((3, 32, 32), 0.25)
    for cell in g.positions:
        assert np.array_equal(mask_image(x, cell, g), x)


def test_global_mean_fill(rng):
    g = make_grid(32, 8, pixel_mean="global")
    x = rng.uniform(-1, 1, (3, 32, 32))
    out = mask_image(x, (1, 2), g)
    assert np.allclose(out[:, 8:16, 16:24], x.mean())


def test_mask_rejects_wrong_extent():
    with pytest.raises(ValueError):
        mask_image(np.zeros((3, 16, 16)), (0, 0), make_grid(32, 8))


def test_patches_tile_the_image():
    g = make_grid(64, 16)
    count = np.zeros((64, 64), int)
    for cell in g.positions:
        rows, cols = g.rect(cell)
        count[rows, cols] += 1
    assert np.all(count == 1)


def test_build_triplets(rng):
    g = make_grid(64, 16)
    x = rng.uniform(-1, 1, (3, 64, 64))
    trip = build_triplets(x, g)
    assert trip.positives.shape == (4, 3, 64, 64)
    assert trip.negatives.shape == (12, 3, 64, 64)
    assert np.array_equal(trip.anchor, x)
    for p in trip.positives:
        assert np.all((p != x).sum(axis=(1, 2)) == 256)


def test_batch_matches_single(rng):
    g = make_grid(32, 8)
    xs = rng.uniform(-1, 1, (3, 3, 32, 32))
    pos, neg = build_triplet_batch(xs, g)
    for i, x in enumerate(xs):
        trip = build_triplets(x, g)
        assert np.array_equal(pos[i], trip.positives)
        assert np.array_equal(neg[i], trip.negatives)


def test_patch_value_shapes(rng):
    g = make_grid(32, 8)
    assert patch_value(rng.random((3, 32, 32)), g).shape == (3, 1, 1)
    assert patch_value(rng.random((5, 3, 32, 32)), g).shape == (5, 3, 1, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3), st.integers(0, 3))
def test_masking_is_idempotent(seed, r, c):
    g = make_grid(32, 8)
    x = np.random.default_rng(seed).uniform(-1, 1, (3, 32, 32))
    fill = patch_value(x, g)
    once = mask_image(x, (r, c), g, fill)
    assert np.array_equal(mask_image(once, (r, c), g, fill), once)
