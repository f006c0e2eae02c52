import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from prostate_dl.data import MaskVolume, Sequence, Volume3D
from prostate_dl.geometry import (BBox2D, ConvSpec, conv_output_size, crop_adjusted, crop_fixed,
                                  fixed_window, max_area_slice, resample_mask, resample_volume,
                                  resize_linear, slice_bbox, upconv_output_size)


# -- bounding boxes ----------------------------------------------------------

def test_slice_bbox_example():
    m = np.zeros((8, 8), np.uint8)
    m[2:5, 3:6] = 1
    bb = slice_bbox(m)
    assert bb == BBox2D(2, 4, 3, 5)
    assert (bb.width, bb.height, bb.area) == (3, 3, 9)


def test_slice_bbox_empty():
    assert slice_bbox(np.zeros((4, 4))) is None


def _brute_bbox(m):
    rows = [r for r in range(m.shape[0]) for c in range(m.shape[1]) if m[r, c]]
    cols = [c for r in range(m.shape[0]) for c in range(m.shape[1]) if m[r, c]]
    if not rows:
        return None
    return BBox2D(min(rows), max(rows), min(cols), max(cols))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_slice_bbox_matches_scan(seed):
    r = np.random.default_rng(seed)
    m = r.random((r.integers(1, 20), r.integers(1, 20))) < r.uniform(0, 0.2)
    assert slice_bbox(m) == _brute_bbox(m)


def _mask_with_areas(boxes, hw=(8, 8)):
    m = np.zeros((len(boxes), *hw), np.uint8)
    for z, box in enumerate(boxes):
        if box:
            h, w = box
            m[z, 1:1 + h, 2:2 + w] = 1
    return MaskVolume(m)


def test_max_area_slice_examples():
    # areas [0, 6, 9, 4]
    loc = max_area_slice(_mask_with_areas([None, (2, 3), (3, 3), (2, 2)]))
    assert loc.slice_index == 2 and loc.area == 9
    assert loc.center == ((1 + 3) // 2, (2 + 4) // 2)
    assert max_area_slice(_mask_with_areas([(3, 3), (3, 3)])).slice_index == 0


def test_max_area_slice_empty():
    with pytest.raises(ValueError):
        max_area_slice(MaskVolume(np.zeros((2, 3, 3), np.uint8)))


def test_area_uses_bbox_not_voxel_count():
    m = np.zeros((2, 8, 8), np.uint8)
    m[0, 0, 0] = m[0, 4, 4] = 1          # 2 voxels, bbox area 25
    m[1, 1:4, 1:4] = 1                   # 9 voxels, bbox area 9
    assert max_area_slice(m).slice_index == 0


# -- cropping ----------------------------------------------------------------

def test_crop_adjusted_exact_extraction():
    img = np.random.default_rng(0).random((40, 40))
    out = crop_adjusted(img, BBox2D(5, 36, 3, 34), 32)
    assert np.array_equal(out, img[5:37, 3:35].astype(np.float32))


def test_crop_adjusted_constant():
    img = np.full((10, 10), 3.5)
    assert np.allclose(crop_adjusted(img, BBox2D(2, 4, 2, 4), 64), 3.5)


def test_crop_adjusted_checker_bilinear():
    checker = (np.indices((6, 6)).sum(0) % 2).astype(float)
    img = np.zeros((10, 10))
    img[2:8, 1:7] = checker
    out = crop_adjusted(img, BBox2D(2, 7, 1, 6), 12)
    # frozen from torch.nn.functional.interpolate(mode="bilinear", align_corners=False)
    row0 = [0.0, 0.25, 0.75, 0.75, 0.25, 0.25, 0.75, 0.75, 0.25, 0.25, 0.75, 1.0]
    row1 = [0.25, 0.375, 0.625, 0.625, 0.375, 0.375, 0.625, 0.625, 0.375, 0.375, 0.625, 0.75]
    assert np.allclose(out[0], row0, atol=1e-6)
    assert np.allclose(out[1], row1, atol=1e-6)
    oracle = torch.nn.functional.interpolate(torch.tensor(checker)[None, None], size=(12, 12),
                                             mode="bilinear", align_corners=False)[0, 0].numpy()
    assert np.abs(out - oracle).max() < 1e-6


def test_crop_adjusted_multichannel_and_errors():
    img = np.random.default_rng(1).random((2, 20, 20))
    out = crop_adjusted(img, BBox2D(0, 9, 0, 4), 8)
    assert out.shape == (2, 8, 8)
    with pytest.raises(ValueError):
        crop_adjusted(img, BBox2D(0, 25, 0, 4), 8)


def test_crop_adjusted_square_option():
    img = np.arange(400, dtype=float).reshape(20, 20)
    out = crop_adjusted(img, BBox2D(4, 5, 4, 11), 8, square=True)
    # the 2x8 box grows to 8x8 rows 1..8 cols 4..11, already the target size
    assert np.array_equal(out, img[1:9, 4:12].astype(np.float32))


def test_crop_fixed_examples():
    img = np.arange(224 * 224, dtype=float).reshape(224, 224)
    assert fixed_window((112, 112), 32, (224, 224)) == (96, 96)
    assert np.array_equal(crop_fixed(img, (112, 112), 32), img[96:128, 96:128])
    assert fixed_window((0, 0), 32, (224, 224)) == (0, 0)
    assert fixed_window((223, 223), 32, (224, 224)) == (192, 192)
    with pytest.raises(ValueError):
        crop_fixed(np.zeros((16, 16)), (8, 8), 32)


@settings(max_examples=200, deadline=None)
@given(st.integers(8, 64), st.integers(8, 64), st.integers(1, 8), st.data())
def test_fixed_window_inside(h, w, crop, data):
    r = data.draw(st.integers(0, h - 1))
    c = data.draw(st.integers(0, w - 1))
    r0, c0 = fixed_window((r, c), crop, (h, w))
    assert 0 <= r0 and r0 + crop <= h and 0 <= c0 and c0 + crop <= w
    # centred whenever the centred window already fits
    if crop // 2 <= r <= h - crop + crop // 2:
        assert r0 == r - crop // 2


# -- resampling --------------------------------------------------------------

def test_resample_128_to_224():
    vol = Volume3D(np.random.default_rng(0).random((20, 128, 128)), Sequence.ADC)
    out = resample_volume(vol, 224)
    assert out.shape == (20, 224, 224)
    assert out.voxels.min() >= vol.voxels.min() - 1e-6
    assert out.voxels.max() <= vol.voxels.max() + 1e-6


def test_resample_identity_and_constant():
    vol = Volume3D(np.random.default_rng(1).random((3, 16, 16)), Sequence.T2W)
    assert np.array_equal(resample_volume(vol, 16).voxels, vol.voxels)
    const = Volume3D(np.full((2, 10, 10), 0.7), Sequence.ADC)
    assert np.allclose(resample_volume(const, 37).voxels, 0.7)


def test_resize_linear_matches_torch():
    a = np.random.default_rng(2).random((3, 11, 17))
    ours = resize_linear(a, (23, 9))
    ref = torch.nn.functional.interpolate(torch.tensor(a)[None], size=(23, 9), mode="bilinear",
                                          align_corners=False)[0].numpy()
    assert np.abs(ours - ref).max() < 1e-12


def test_resample_mask_binary():
    m = MaskVolume((np.random.default_rng(3).random((2, 32, 32)) < 0.3).astype(np.uint8))
    out = resample_mask(m, 56)
    assert out.shape == (2, 56, 56)
    assert set(np.unique(out.voxels)) <= {0, 1}


# -- conv arithmetic ---------------------------------------------------------

@pytest.mark.parametrize("spec,out", [
    (ConvSpec(6, 3, 3, 0, 1), 2),
    (ConvSpec(17, 1, 1, 0, 1), 17),
    (ConvSpec(56, 2, 2, 0, 1), 28),
    (ConvSpec(32, 3, 1, 1, 1), 32),
    (ConvSpec(32, 3, 1, 2, 2), 32),
])
def test_conv_output_size(spec, out):
    assert conv_output_size(spec) == out


def test_conv_output_size_errors():
    with pytest.raises(ValueError):
        conv_output_size(ConvSpec(2, 5))
    with pytest.raises(ValueError):
        ConvSpec(4, 3, dilation=0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2), st.integers(1, 3))
def test_conv_output_size_matches_torch(x, k, s, p, d):
    spec = ConvSpec(x, k, s, p, d)
    span = x + 2 * p - d * (k - 1)
    if span < 1:
        with pytest.raises(ValueError):
            conv_output_size(spec)
        return
    conv = torch.nn.Conv1d(1, 1, k, s, p, d)
    assert conv(torch.zeros(1, 1, x)).shape[-1] == conv_output_size(spec)


def test_upconv_output_size():
    assert upconv_output_size(ConvSpec(8, 2, 2)) == 16
    up = torch.nn.ConvTranspose1d(1, 1, 3, 2, 1)
    assert up(torch.zeros(1, 1, 7)).shape[-1] == upconv_output_size(ConvSpec(7, 3, 2, 1))
