import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from buildage import patches
from buildage.errors import OutOfBoundsError


def test_default_grid_on_64x64_has_78_patches():
    geoms = patches.sample_grid(64, 64, patches.DEFAULT_SIDES, 0.5)
    assert len(geoms) == 78
    # per-scale breakdown: strides 8, 12, 16, 20
    per_scale = [sum(1 for g in geoms if g.side == s) for s in (16, 24, 32, 40)]
    assert per_scale == [49, 16, 9, 4]


@pytest.mark.parametrize("side,overlap,expected", [
    (16, 0.5, 8),
    (24, 0.5, 12),
    (32, 0.5, 16),
    (40, 0.5, 20),
    (16, 0.0, 16),
    (3, 0.9, 1),    # round(0.3) = 0, clamped up
    (7, 0.5, 4),    # round(3.5) banker's -> 4
])
def test_grid_stride_examples(side, overlap, expected):
    assert patches.grid_stride(side, overlap) == expected


@given(
    dim=st.integers(4, 220),
    side=st.integers(4, 64),
    overlap=st.floats(0.0, 0.95),
)
def test_axis_count_matches_closed_form(dim, side, overlap):
    stride = patches.grid_stride(side, overlap)
    got = len(patches.axis_positions(dim, side, stride))
    expected = 0 if dim < side else (dim - side) // stride + 1
    assert got == expected


def test_grid_order_is_scale_then_row_then_column():
    geoms = patches.sample_grid(48, 32, (16, 24), 0.5)
    keys = [(g.scale_index, g.y, g.x) for g in geoms]
    assert keys == sorted(keys)
    assert geoms[0] == patches.PatchGeometry(0, 0, 16, 0)
    # scale 0 occupies the prefix
    first_24 = next(i for i, g in enumerate(geoms) if g.side == 24)
    assert all(g.side == 16 for g in geoms[:first_24])


@given(
    width=st.integers(16, 120),
    height=st.integers(16, 120),
    overlap=st.floats(0.0, 0.9),
)
def test_same_scale_neighbors_overlap_by_side_minus_stride(width, height, overlap):
    geoms = patches.sample_grid(width, height, (16,), overlap)
    stride = patches.grid_stride(16, overlap)
    row0 = [g for g in geoms if g.y == 0]
    for a, b in zip(row0, row0[1:]):
        assert b.x - a.x == stride
        assert (a.x + a.side) - b.x == a.side - stride


def test_grid_fits_inside_image():
    geoms = patches.sample_grid(70, 50, patches.DEFAULT_SIDES, 0.5)
    assert geoms
    for g in geoms:
        assert 0 <= g.x and g.x + g.side <= 70
        assert 0 <= g.y and g.y + g.side <= 50


def test_scales_larger_than_image_are_skipped():
    geoms = patches.sample_grid(20, 20, patches.DEFAULT_SIDES, 0.5)
    assert {g.side for g in geoms} == {16}


def test_extract_returns_an_independent_copy():
    image = np.arange(30 * 30 * 3, dtype=np.uint8).reshape(30, 30, 3)
    g = patches.PatchGeometry(2, 3, 16)
    patch = patches.extract(image, g)
    assert patch.pixels.shape == (16, 16, 3)
    assert np.array_equal(patch.pixels, image[3:19, 2:18])
    patch.pixels[:] = 0
    assert image[3, 2, 0] != 0 or image[3, 2, 1] != 0


@pytest.mark.parametrize("x,y", [(-1, 0), (0, -1), (15, 0), (0, 15)])
def test_extract_rejects_out_of_bounds(x, y):
    image = np.zeros((30, 30, 3), dtype=np.uint8)
    with pytest.raises(OutOfBoundsError):
        patches.extract(image, patches.PatchGeometry(x, y, 16))


def test_patch_config_validation():
    with pytest.raises(ValueError):
        patches.PatchConfig(sides=())
    with pytest.raises(ValueError):
        patches.PatchConfig(overlap=1.0)
    with pytest.raises(ValueError):
        patches.PatchConfig(overlap=-0.1)
    with pytest.raises(ValueError):
        patches.PatchConfig(sides=(0, 16))
