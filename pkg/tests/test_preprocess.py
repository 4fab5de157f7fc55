import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octseg.preprocess import (
    TransformError,
    TransformSpec,
    apply_transform,
    crop,
    crop_window,
    pad_width,
    restore_geometry,
)


def test_pad_700_to_704_adds_two_columns_each_side():
    img = np.random.default_rng(0).random((1024, 700)).astype(np.float32)
    out = pad_width(img, 704, 0.0)
    assert out.shape == (1024, 704)
    assert np.all(out[:, :2] == 0) and np.all(out[:, -2:] == 0)
    np.testing.assert_array_equal(out[:, 2:702], img)


def test_pad_identity_when_width_matches():
    img = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(pad_width(img, 4), img)


def test_pad_odd_split_column_sums():
    # hand-built oracle: 3 columns of ones centred in 5 -> one fill column per side
    out = pad_width(np.ones((4, 3)), 5, 0.0)
    expected = np.zeros((4, 5))
    expected[:, 1:4] = 1
    np.testing.assert_array_equal(out, expected)
    assert out.sum(axis=0).tolist() == [0, 4, 4, 4, 0]


def test_pad_floor_left_ceil_right():
    out = pad_width(np.ones((1, 2)), 5, 0.0)
    assert out[0].tolist() == [0, 1, 1, 0, 0]


def test_pad_never_truncates():
    with pytest.raises(TransformError):
        pad_width(np.ones((2, 6)), 5)


def test_crop_default_geometry():
    img = np.random.default_rng(1).random((1024, 704))
    out = crop(img, TransformSpec())
    assert out.shape == (352, 704)
    np.testing.assert_array_equal(out, img[:352])


def test_crop_identity():
    img = np.random.default_rng(2).random((64, 96))
    np.testing.assert_array_equal(crop(img, TransformSpec(96, 64, 96)), img)


def test_crop_window_ramp():
    ramp = np.arange(16).reshape(4, 4)
    # index oracle: rows 0..2, centred columns (4 - 2) // 2 = 1 .. 3
    expected = np.array([[ramp[r, c] for c in range(1, 3)] for r in range(0, 2)])
    np.testing.assert_array_equal(crop_window(ramp, 2, 2, 0), expected)


def test_crop_out_of_bounds_names_dimension():
    with pytest.raises(TransformError, match="height"):
        crop(np.zeros((300, 704)), TransformSpec())
    with pytest.raises(TransformError, match="width"):
        crop_window(np.zeros((10, 10)), 4, 12)


@pytest.mark.parametrize("kw", [dict(crop_height=350), dict(crop_width=700, target_width=700),
                                dict(crop_width=736), dict(normalize="zscore")])
def test_spec_rejects_invalid(kw):
    with pytest.raises(TransformError):
        TransformSpec(**kw)


def test_apply_transform_default_shapes():
    rng = np.random.default_rng(3)
    img = rng.random((1024, 700)).astype(np.float32)
    mask = (rng.random((1024, 700)) > 0.99).astype(np.uint8)
    out_img, out_mask = apply_transform(img, mask, TransformSpec())
    assert out_img.shape == out_mask.shape == (352, 704)
    assert set(np.unique(out_mask)) <= {0, 1}


def test_apply_transform_empty_mask():
    _, m = apply_transform(np.ones((64, 60)), np.zeros((64, 60), np.uint8), TransformSpec(64, 32, 64))
    assert not m.any()


def test_apply_transform_shape_mismatch():
    with pytest.raises(TransformError):
        apply_transform(np.ones((64, 60)), np.zeros((64, 61)), TransformSpec(64, 32, 64))


def test_single_pixel_maps_through_coordinate_function():
    spec = TransformSpec(target_width=704, crop_height=352, crop_width=640, crop_row_offset=10)
    h, w = 400, 700
    pad_left = (704 - w) // 2
    col_start = (704 - 640) // 2
    r, c = 100, 350
    mask = np.zeros((h, w), np.uint8)
    mask[r, c] = 1
    _, out = apply_transform(np.zeros((h, w)), mask, spec)
    assert out.sum() == 1
    assert out[r - 10, c + pad_left - col_start] == 1


def test_integer_input_normalized_by_code_range():
    img = np.full((32, 32), 65535, np.uint16)
    out, _ = apply_transform(img, None, TransformSpec(32, 32, 32))
    assert out.dtype == np.float32 and np.all(out == 1.0)


@settings(max_examples=50, deadline=None)
@given(
    h=st.integers(32, 80),
    w=st.integers(40, 72),
    extra=st.integers(0, 8),
    offset=st.integers(0, 16),
    seed=st.integers(0, 2**16),
)
def test_equivariance_and_divisibility(h, w, extra, offset, seed):
    spec = TransformSpec(target_width=w + extra, crop_height=32, crop_width=32,
                         crop_row_offset=min(offset, h - 32))
    rng = np.random.default_rng(seed)
    img = rng.random((h, w)).astype(np.float32)
    mask = (rng.random((h, w)) > 0.7).astype(np.uint8)
    out_img, out_mask = apply_transform(img, mask, spec)
    assert out_img.shape[0] % 32 == 0 and out_img.shape[1] % 32 == 0
    # the same coordinate function carries image and mask
    pad_left, col_start = spec.column_mapping(w)
    r0 = spec.crop_row_offset
    for i, j in [(0, 0), (31, 31), (5, 17)]:
        src_c = j + col_start - pad_left
        if 0 <= src_c < w:
            assert out_img[i, j] == img[i + r0, src_c]
            assert out_mask[i, j] == mask[i + r0, src_c]
        else:
            assert out_img[i, j] == 0 and out_mask[i, j] == 0
    # idempotence once already in output geometry (offset 0)
    spec0 = TransformSpec(target_width=w + extra, crop_height=32, crop_width=32)
    a, b = apply_transform(img, mask, spec0)
    a2, b2 = apply_transform(a, b, spec0)
    np.testing.assert_array_equal(a, a2)
    np.testing.assert_array_equal(b, b2)


def test_crop_never_reads_fill_when_window_inside_original():
    spec = TransformSpec(target_width=704, crop_height=352, crop_width=640)
    img = np.full((1024, 700), 0.5, np.float32)
    out, _ = apply_transform(img, None, spec)
    assert np.all(out == 0.5)


def test_restore_geometry_inverts_transform():
    spec = TransformSpec(target_width=704, crop_height=352, crop_width=704, crop_row_offset=8)
    rng = np.random.default_rng(4)
    mask = (rng.random((400, 700)) > 0.9).astype(np.uint8)
    _, out = apply_transform(np.zeros((400, 700)), mask, spec)
    back = restore_geometry(out, 400, 700, spec)
    assert back.shape == (400, 700)
    np.testing.assert_array_equal(back[8:360], mask[8:360])
    assert not back[:8].any() and not back[360:].any()
