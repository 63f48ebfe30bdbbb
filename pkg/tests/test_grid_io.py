import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from topotex.grid_io import (DegenerateSurfaceError, DepthMap, GridFormatError, LabelMask,
                             extract_patches, load_depth_map, load_label_mask, patch_label,
                             save_depth_map, save_label_mask, z_standardize_global)


def test_csv_2x2(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("0,1\n2,3\n")
    m = load_depth_map(p)
    assert m.width == 2 and m.height == 2
    assert m.values.ravel().tolist() == [0, 1, 2, 3]


def test_csv_nan_reports_position(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("0,1,2\n3,nan,5\n")
    with pytest.raises(GridFormatError, match=r"row 1.*col 1"):
        load_depth_map(p)


def test_csv_ragged_rows(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("0,1\n2\n")
    with pytest.raises(GridFormatError):
        load_depth_map(p)


def test_pgm16_all_zero(tmp_path):
    p = tmp_path / "z.pgm"
    p.write_bytes(b"P5\n3 2\n65535\n" + b"\x00" * 12)
    m = load_depth_map(p, "pgm16")
    assert m.shape == (2, 3)
    assert np.all(m.values == 0)


def test_pgm16_is_big_endian(tmp_path):
    p = tmp_path / "b.pgm"
    p.write_bytes(b"P5\n# comment\n2 1\n65535\n" + struct.pack(">HH", 1, 65535))
    m = load_depth_map(p)
    assert m.values.tolist() == [[1 / 65535, 1.0]]


def test_pgm_bad_header(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(GridFormatError):
        load_depth_map(p)


def test_f64raw_layout(tmp_path):
    p = tmp_path / "m.f64"
    vals = np.arange(6, dtype="<f8") * 0.5
    p.write_bytes(struct.pack("<QQ", 3, 2) + vals.tobytes())
    m = load_depth_map(p, "f64raw")
    assert m.shape == (2, 3)
    assert m.values.tolist() == [[0, 0.5, 1.0], [1.5, 2.0, 2.5]]


def test_f64raw_inf_rejected(tmp_path):
    p = tmp_path / "m.f64"
    vals = np.array([0.0, np.inf, 1.0, 2.0], dtype="<f8")
    p.write_bytes(struct.pack("<QQ", 2, 2) + vals.tobytes())
    with pytest.raises(GridFormatError, match=r"row 0.*col 1"):
        load_depth_map(p)


def test_f64raw_truncated(tmp_path):
    p = tmp_path / "m.f64"
    p.write_bytes(struct.pack("<QQ", 4, 4) + b"\x00" * 8)
    with pytest.raises(GridFormatError):
        load_depth_map(p)


@pytest.mark.parametrize("fmt,ext", [("csv", ".csv"), ("f64raw", ".f64")])
def test_roundtrip_exact(tmp_path, fmt, ext):
    rng = np.random.default_rng(0)
    m = DepthMap(rng.normal(size=(5, 7)))
    path = tmp_path / ("m" + ext)
    save_depth_map(m, path, fmt)
    assert np.array_equal(load_depth_map(path).values, m.values)


def test_label_mask_roundtrip_and_zero(tmp_path):
    lab = LabelMask(np.array([[1, 2], [2, 1]]))
    path = tmp_path / "mask.pgm"
    save_label_mask(lab, path)
    assert np.array_equal(load_label_mask(path).labels, lab.labels)
    bad = tmp_path / "zero.pgm"
    bad.write_bytes(b"P5\n2 1\n255\n\x01\x00")
    with pytest.raises(GridFormatError, match="label 0"):
        load_label_mask(bad)


def test_label_mask_invariant():
    with pytest.raises(ValueError):
        LabelMask(np.array([[1, 3]]))


def test_depth_map_rejects_nonfinite():
    with pytest.raises(ValueError, match="row 0, col 1"):
        DepthMap(np.array([[0.0, np.nan]]))


def test_zstd_two_points():
    out = z_standardize_global(DepthMap(np.array([[0.0, 2.0]])))
    assert out.values.tolist() == [[-1.0, 1.0]]


def test_zstd_moments_recomputed():
    out = z_standardize_global(DepthMap(np.array([[1.0, 2.0], [3.0, 4.0]]))).values.ravel()
    n = len(out)
    mean = sum(out) / n
    var = sum((x - mean) ** 2 for x in out) / n
    assert abs(mean) < 1e-12
    assert abs(var - 1) < 1e-12


def test_zstd_idempotent_and_constant():
    rng = np.random.default_rng(1)
    once = z_standardize_global(DepthMap(rng.normal(3, 2, (20, 20))))
    twice = z_standardize_global(once)
    assert np.max(np.abs(once.values - twice.values)) < 1e-12
    with pytest.raises(DegenerateSurfaceError):
        z_standardize_global(DepthMap(np.full((3, 3), 4.0)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(-100, 100)),
       st.floats(0.01, 50), st.floats(-100, 100))
def test_zstd_affine_invariance(v, a, b):
    if np.ptp(v) < 1e-3:
        return
    ref = z_standardize_global(DepthMap(v)).values
    out = z_standardize_global(DepthMap(a * v + b)).values
    assert np.max(np.abs(ref - out)) < 1e-9


@pytest.mark.parametrize("shape,size,stride,count", [
    ((128, 128), 128, 16, 1), ((160, 160), 128, 16, 9), ((4, 4), 2, 2, 4), ((200, 150), 64, 20, 35),
])
def test_patch_count(shape, size, stride, count):
    ps = extract_patches(DepthMap(np.zeros(shape)), size, stride)
    h, w = shape
    assert len(ps) == count == ((h - size) // stride + 1) * ((w - size) // stride + 1)


def test_patches_tile_and_read_back():
    v = np.arange(16.0).reshape(4, 4)
    ps = extract_patches(DepthMap(v), 2, 2)
    assert [p.origin for p in ps] == [(0, 0), (0, 2), (2, 0), (2, 2)]
    for p in ps:
        r, c = p.origin
        assert np.array_equal(p.values, v[r:r + 2, c:c + 2])


def test_patches_too_big():
    with pytest.raises(ValueError):
        extract_patches(DepthMap(np.zeros((10, 20))), 11, 1)


def test_patch_label_rules():
    mask = LabelMask(np.array([[1, 1, 2, 2]] * 4))
    ps = extract_patches(DepthMap(np.zeros((4, 4))), 2, 1)
    labs = {p.origin: patch_label(mask, p) for p in ps}
    assert labs[(0, 0)] == 1          # all class 1
    assert labs[(0, 2)] == 2          # all class 2
    assert labs[(0, 1)] == 1          # exactly half: tie to class 1
    assert patch_label(mask, ps[1], threshold=0.75) == 2
