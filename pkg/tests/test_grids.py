import struct

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lila.grids import (
    CropSpec, GridError, RasterFormatError, as_grid, crop_apply, raster_read, raster_write,
    resample_bilinear, spatial_gradient_abs,
)


def bilinear_oracle(src, top, left, ch, cw, oh, ow):
    """Per-pixel evaluation of the documented half-pixel sampling convention."""
    h, w, c = src.shape
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            y = min(max(top + (i + 0.5) * ch / oh - 0.5, 0), h - 1)
            x = min(max(left + (j + 0.5) * cw / ow - 0.5, 0), w - 1)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            a, b = y - y0, x - x0
            out[i, j] = ((1 - a) * (1 - b) * src[y0, x0] + (1 - a) * b * src[y0, x1]
                         + a * (1 - b) * src[y1, x0] + a * b * src[y1, x1])
    return out


def test_identity_crop_is_exact():
    g = np.random.default_rng(0).random((5, 7, 3))
    np.testing.assert_array_equal(crop_apply(g, CropSpec.full(5, 7)), g)


def test_constant_grid_survives_any_crop():
    g = np.full((2, 2, 1), 3.0)
    out = crop_apply(g, CropSpec(0, 0, 2, 2, 5, 5))
    np.testing.assert_allclose(out, 3.0)
    out = crop_apply(g, CropSpec(1, 1, 1, 1, 3, 3))
    np.testing.assert_allclose(out, 3.0)


def test_ramp_crop_hand_values():
    # two identical rows keep the 4 -> 2 crop aspect-preserving
    ramp = np.tile(np.array([0.0, 1.0, 2.0, 3.0]), (2, 1))[..., None]
    out = crop_apply(ramp, CropSpec(0, 0, 2, 4, 1, 2))
    # samples at x = (j + 0.5) * 2 - 0.5 = 0.5, 2.5
    np.testing.assert_allclose(out[0, :, 0], [0.5, 2.5])
    np.testing.assert_allclose(out, bilinear_oracle(ramp, 0, 0, 2, 4, 1, 2))


def test_resample_column_hand_values():
    col = np.array([0.0, 2.0]).reshape(2, 1, 1)
    out = resample_bilinear(col, 3, 1)
    # y = -1/6 (clamped to 0), 0.5, 7/6 (clamped to 1)
    np.testing.assert_allclose(out[:, 0, 0], [0.0, 1.0, 2.0])


def test_resample_same_size_is_bit_identical():
    g = np.random.default_rng(1).random((4, 6, 2))
    assert resample_bilinear(g, 4, 6).tobytes() == g.tobytes()


def test_resample_matches_torch_half_pixel_convention():
    g = np.random.default_rng(2).random((9, 11, 3))
    ours = resample_bilinear(g, 5, 17)
    t = torch.from_numpy(g).permute(2, 0, 1)[None]
    ref = F.interpolate(t, size=(5, 17), mode="bilinear", align_corners=False)
    np.testing.assert_allclose(ours, ref[0].permute(1, 2, 0).numpy(), atol=1e-12)


def test_crop_matches_oracle_on_random_window():
    rng = np.random.default_rng(3)
    g = rng.random((12, 16, 2))
    spec = CropSpec(2, 3, 6, 8, 9, 12)
    np.testing.assert_allclose(crop_apply(g, spec), bilinear_oracle(g, 2, 3, 6, 8, 9, 12))


def test_crop_out_of_bounds_rejected():
    with pytest.raises(GridError):
        crop_apply(np.zeros((4, 4, 1)), CropSpec(2, 0, 4, 4, 4, 4))


def test_crop_aspect_violation_rejected():
    with pytest.raises(GridError, match="aspect"):
        crop_apply(np.zeros((8, 8, 1)), CropSpec(0, 0, 4, 8, 4, 4))


def test_nonfinite_grid_rejected():
    with pytest.raises(GridError):
        as_grid(np.array([[[np.nan]]]))


def test_gradient_examples():
    const = np.full((3, 4, 2), 7.0)
    assert np.all(spatial_gradient_abs(const, "x") == 0)
    ramp = np.tile(2.0 * np.arange(5), (3, 1))[..., None]
    np.testing.assert_allclose(spatial_gradient_abs(ramp, "x"), 2.0)
    np.testing.assert_allclose(spatial_gradient_abs(ramp[:, ::-1], "x"), 2.0)
    np.testing.assert_allclose(spatial_gradient_abs(np.swapaxes(ramp, 0, 1), "y"), 2.0)


def test_gradient_needs_two_pixels():
    with pytest.raises(GridError):
        spatial_gradient_abs(np.zeros((3, 1, 1)), "x")
    with pytest.raises(GridError):
        spatial_gradient_abs(np.zeros((1, 3, 1)), "y")


grids = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)),
               elements=st.floats(-100, 100, allow_nan=False))


@given(grids, st.integers(1, 9), st.integers(1, 9))
def test_resample_preserves_bounds(g, oh, ow):
    out = resample_bilinear(g, oh, ow)
    lo = g.min(axis=(0, 1)) - 1e-9
    hi = g.max(axis=(0, 1)) + 1e-9
    assert np.all(out >= lo) and np.all(out <= hi)


@given(grids.filter(lambda g: g.shape[1] >= 2))
def test_gradient_nonnegative_and_zero_iff_constant(g):
    d = spatial_gradient_abs(g, "x")
    assert d.shape == g.shape and np.all(d >= 0)
    for c in range(g.shape[2]):
        constant_rows = np.all(g[:, :, c] == g[:, :1, c], axis=1)
        assert np.array_equal(np.all(d[:, :, c] == 0, axis=1), constant_rows)


@settings(max_examples=30)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4)),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=32)))
def test_raster_round_trip_bit_exact(tmp_path_factory, g):
    path = tmp_path_factory.mktemp("r") / "g.lgrd"
    raster_write(g, path)
    back = raster_read(path)
    assert back.tobytes() == g.astype("<f4").tobytes()


def test_raster_round_trip_subnormals(tmp_path):
    g = np.array([0.0, -0.0, 1e-45, 1e-40, np.finfo(np.float32).tiny], dtype=np.float32)
    g = g.reshape(1, 5, 1)
    raster_write(g, tmp_path / "s.lgrd")
    assert raster_read(tmp_path / "s.lgrd").tobytes() == g.tobytes()


def test_raster_header_layout(tmp_path):
    raster_write(np.zeros((2, 3, 4), np.float32), tmp_path / "h.lgrd")
    raw = (tmp_path / "h.lgrd").read_bytes()
    assert raw[:4] == b"LGRD"
    assert struct.unpack("<IIIII", raw[4:24]) == (1, 2, 3, 4, 1)
    assert len(raw) == 24 + 2 * 3 * 4 * 4


def test_raster_bad_magic(tmp_path):
    raster_write(np.zeros((2, 2, 1), np.float32), tmp_path / "x.lgrd")
    raw = bytearray((tmp_path / "x.lgrd").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "x.lgrd").write_bytes(bytes(raw))
    with pytest.raises(RasterFormatError, match="bad magic"):
        raster_read(tmp_path / "x.lgrd")


def test_raster_truncated_payload(tmp_path):
    raster_write(np.zeros((2, 2, 1), np.float32), tmp_path / "t.lgrd")
    raw = (tmp_path / "t.lgrd").read_bytes()
    (tmp_path / "t.lgrd").write_bytes(raw[:-3])
    with pytest.raises(RasterFormatError, match="truncated"):
        raster_read(tmp_path / "t.lgrd")


def test_raster_zero_dim_rejected(tmp_path):
    (tmp_path / "z.lgrd").write_bytes(struct.pack("<4sIIIII", b"LGRD", 1, 0, 2, 1, 1))
    with pytest.raises(RasterFormatError, match="zero dimension"):
        raster_read(tmp_path / "z.lgrd")
