import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsidiff import datacube as dc
from hsidiff.errors import CoverageError, DimensionError, FormatError, SizeError, UnsupportedError
from oracles import envi_bytes_loop


def write_pair(tmp_path, header: str, payload: bytes, name="scene"):
    hdr = tmp_path / f"{name}.hdr"
    hdr.write_text(header)
    (tmp_path / f"{name}.img").write_bytes(payload)
    return hdr


def header(samples, lines, bands, interleave="bsq", dtype=4, extra=""):
    return (
        f"ENVI\nsamples = {samples}\nlines = {lines}\nbands = {bands}\n"
        f"interleave = {interleave}\ndata type = {dtype}\nbyte order = 0\n{extra}"
    )


def test_load_minimal_bsq(tmp_path):
    payload = np.array([1, 2, 3, 4], dtype="<f4").tobytes()
    assert len(payload) == 16
    cube = dc.load_envi(write_pair(tmp_path, header(2, 2, 1), payload))
    assert cube.shape == (2, 2, 1)
    np.testing.assert_array_equal(cube.values[:, :, 0], [[1, 2], [3, 4]])


def test_save_single_value_encoding(tmp_path):
    dc.save_envi(dc.HyperCube(np.full((1, 1, 1), 7.0, dtype=np.float32)), tmp_path / "one.hdr")
    assert (tmp_path / "one.img").read_bytes() == bytes.fromhex("0000e040")
    text = (tmp_path / "one.hdr").read_text()
    for key in ("samples = 1", "lines = 1", "bands = 1", "data type = 4", "byte order = 0", "interleave = bsq"):
        assert key in text


@pytest.mark.parametrize("interleave", dc.INTERLEAVES)
def test_load_matches_loop_serialization(tmp_path, interleave):
    rng = np.random.default_rng(3)
    values = rng.normal(size=(4, 5, 3)).astype(np.float32)
    hdr = write_pair(tmp_path, header(5, 4, 3, interleave), envi_bytes_loop(values, interleave))
    np.testing.assert_array_equal(dc.load_envi(hdr).values, values)


@pytest.mark.parametrize("interleave", dc.INTERLEAVES)
def test_save_matches_loop_serialization(tmp_path, interleave):
    values = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    dc.save_envi(dc.HyperCube(values), tmp_path / "c.hdr", interleave)
    assert (tmp_path / "c.img").read_bytes() == envi_bytes_loop(values, interleave)


def test_bil_round_trip_2x2x2(tmp_path):
    values = np.arange(8, dtype=np.float32).reshape(2, 2, 2) * 0.5
    dc.save_envi(dc.HyperCube(values), tmp_path / "c.hdr", "bil")
    np.testing.assert_array_equal(dc.load_envi(tmp_path / "c.hdr").values, values)


def test_round_trip_binary_identical(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(3, 4, 5)).astype(np.float32)
    hdr = write_pair(tmp_path, header(4, 3, 5), envi_bytes_loop(values, "bsq"), "src")
    dc.save_envi(dc.load_envi(hdr), tmp_path / "dst.hdr")
    assert (tmp_path / "dst.img").read_bytes() == (tmp_path / "src.img").read_bytes()


@settings(max_examples=25, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
    src=st.sampled_from(dc.INTERLEAVES),
    dst=st.sampled_from(dc.INTERLEAVES),
    seed=st.integers(0, 2**31),
)
def test_interleave_conversion_is_bijection(tmp_path_factory, shape, src, dst, seed):
    tmp = tmp_path_factory.mktemp("rt")
    values = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    dc.save_envi(dc.HyperCube(values), tmp / "a.hdr", src)
    a = dc.load_envi(tmp / "a.hdr")
    dc.save_envi(a, tmp / "b.hdr", dst)
    b = dc.load_envi(tmp / "b.hdr")
    assert a.interleave == src and b.interleave == dst
    np.testing.assert_array_equal(b.values, values)


def test_uint16_promoted_unchanged(tmp_path):
    raw = np.array([0, 1, 65535, 1234], dtype="<u2")
    cube = dc.load_envi(write_pair(tmp_path, header(2, 2, 1, dtype=12), raw.tobytes()))
    assert cube.values.dtype == np.float32
    np.testing.assert_array_equal(cube.values.ravel(), raw.astype(np.float32))


def test_big_endian_byte_order(tmp_path):
    vals = np.array([1.5, -2.0], dtype=">f4")
    text = header(2, 1, 1).replace("byte order = 0", "byte order = 1")
    cube = dc.load_envi(write_pair(tmp_path, text, vals.tobytes()))
    np.testing.assert_array_equal(cube.values.ravel(), [1.5, -2.0])


def test_wavelengths_parsed(tmp_path):
    text = header(1, 1, 3, extra="wavelength = {400.0,\n 500.0, 600.5}\n")
    cube = dc.load_envi(write_pair(tmp_path, text, np.zeros(3, "<f4").tobytes()))
    np.testing.assert_array_equal(cube.wavelengths, [400.0, 500.0, 600.5])


def test_missing_key_names_it(tmp_path):
    text = header(2, 2, 1).replace("lines = 2\n", "")
    with pytest.raises(FormatError) as err:
        dc.load_envi(write_pair(tmp_path, text, bytes(16)))
    assert err.value.key == "lines"
    assert "lines" in str(err.value)


def test_garbled_value_names_key(tmp_path):
    text = header(2, 2, 1).replace("bands = 1", "bands = one")
    with pytest.raises(FormatError, match="bands"):
        dc.load_envi(write_pair(tmp_path, text, bytes(16)))


def test_size_mismatch(tmp_path):
    with pytest.raises(SizeError):
        dc.load_envi(write_pair(tmp_path, header(2, 2, 1), bytes(12)))


def test_unsupported_dtype(tmp_path):
    with pytest.raises(UnsupportedError):
        dc.load_envi(write_pair(tmp_path, header(2, 2, 1, dtype=5), bytes(32)))


def test_cube_invariants():
    with pytest.raises(ValueError):
        dc.HyperCube(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        dc.HyperCube(np.zeros((1, 1, 2)), wavelengths=[500.0, 400.0])
    with pytest.raises(DimensionError):
        dc.HyperCube(np.zeros((1, 1, 2)), wavelengths=[500.0])
    with pytest.raises(DimensionError):
        dc.HyperCube(np.zeros((2, 2)))


# -- normalization ----------------------------------------------------------


def test_normalize_examples():
    cube = dc.HyperCube(np.array([[[2.0, 5.0]], [[4.0, 5.0]]]))
    norm, rec = dc.normalize(cube)
    np.testing.assert_array_equal(norm.values[:, 0, 0], [0.0, 1.0])
    assert rec.mins[0] == 2 and rec.maxs[0] == 4 and not rec.degenerate[0]
    np.testing.assert_array_equal(norm.values[:, 0, 1], [0.0, 0.0])
    assert rec.degenerate[1]


def test_denormalize_inverts():
    rng = np.random.default_rng(1)
    values = rng.uniform(-50, 300, size=(6, 7, 5)).astype(np.float32)
    cube = dc.HyperCube(values)
    norm, rec = dc.normalize(cube)
    back = dc.denormalize(norm, rec)
    # oracle: invert each band with its own recorded affine map
    for b in range(5):
        expected = norm.values[:, :, b].astype(np.float64) * (rec.maxs[b] - rec.mins[b]) + rec.mins[b]
        np.testing.assert_allclose(back.values[:, :, b], expected, rtol=0, atol=1e-4)
    np.testing.assert_allclose(back.values, values, rtol=1e-6, atol=1e-6 * 300)


def test_normalize_idempotent():
    rng = np.random.default_rng(2)
    cube = dc.HyperCube(rng.uniform(size=(5, 5, 3)))
    once, _ = dc.normalize(cube)
    twice, _ = dc.normalize(once)
    np.testing.assert_allclose(twice.values, once.values, atol=1e-6)


def test_dynamic_range():
    cube = dc.HyperCube(np.array([0.1, 0.9, 0.5]).reshape(1, 3, 1))
    assert dc.dynamic_range(cube, 0) == pytest.approx(0.8)
    assert dc.dynamic_range(dc.HyperCube(np.full((2, 2, 1), 3.0)), 0) == 0.0
    rng = np.random.default_rng(4)
    vals = rng.normal(size=(8, 8, 2))
    cube = dc.HyperCube(vals)
    lo, hi = np.inf, -np.inf
    for i in range(8):
        for j in range(8):
            lo, hi = min(lo, vals[i, j, 1]), max(hi, vals[i, j, 1])
    assert dc.dynamic_range(cube, 1) == hi - lo
    with pytest.raises(IndexError):
        dc.dynamic_range(cube, 2)


# -- patches ----------------------------------------------------------------


def test_single_valid_patch():
    cube = dc.HyperCube(np.random.default_rng(0).uniform(size=(32, 32, 32)))
    for seed in (0, 1, 99):
        (p,) = dc.sample_patches(cube, 1, 32, seed)
        assert (p.index.line0, p.index.sample0, p.index.band0) == (0, 0, 0)
        np.testing.assert_array_equal(p.values, cube.values)


def test_patch_offsets_in_range_and_reproducible():
    cube = dc.HyperCube(np.zeros((64, 64, 64), dtype=np.float32))
    a = dc.sample_patches(cube, 200, 32, seed=11)
    b = dc.sample_patches(cube, 200, 32, seed=11)
    assert [p.index for p in a] == [p.index for p in b]
    starts = np.array([(p.index.line0, p.index.sample0, p.index.band0) for p in a])
    assert starts.min() >= 0 and starts.max() <= 32
    assert all(p.index.fits(cube.shape) for p in a)
    # every offset value gets used eventually over many draws
    many = dc.sample_patches(cube, 5000, 32, seed=5)
    assert {p.index.line0 for p in many} == set(range(33))


def test_patch_too_large():
    with pytest.raises(DimensionError):
        dc.sample_patches(dc.HyperCube(np.zeros((8, 8, 4))), 1, 5)


def test_reassemble_identity_and_mean():
    rng = np.random.default_rng(0)
    vals = rng.uniform(size=(4, 4, 4))
    whole = dc.PatchIndex(0, 0, 0, 4)
    np.testing.assert_array_equal(dc.reassemble([(whole, vals)], 4, 4, 4).values, vals)
    np.testing.assert_array_equal(dc.reassemble([(whole, vals), (whole, vals)], 4, 4, 4).values, vals)

    a = dc.PatchIndex(0, 0, 0, 2)
    b = dc.PatchIndex(1, 0, 0, 2)
    cube, counts = dc.reassemble([(a, np.zeros((2, 2, 2))), (b, np.ones((2, 2, 2)))], 3, 2, 2, return_counts=True)
    np.testing.assert_array_equal(cube.values[0], 0.0)
    np.testing.assert_array_equal(cube.values[1], 0.5)
    np.testing.assert_array_equal(cube.values[2], 1.0)
    assert counts[1].min() == 2


def test_reassemble_partition_exact():
    rng = np.random.default_rng(3)
    vals = rng.normal(size=(8, 8, 8))
    parts = [(idx, vals[idx.slices()]) for idx in dc.tile_indices(vals.shape, 4, stride=4)]
    assert len(parts) == 8
    np.testing.assert_array_equal(dc.reassemble(parts, 8, 8, 8).values, vals)


def test_reassemble_coverage_error():
    with pytest.raises(CoverageError) as err:
        dc.reassemble([(dc.PatchIndex(0, 0, 0, 2), np.zeros((2, 2, 2)))], 3, 2, 2)
    assert err.value.coord == (2, 0, 0)


def test_tile_indices_cover_everything():
    for shape in ((10, 13, 9), (8, 8, 8), (33, 40, 32)):
        tiles = dc.tile_indices(shape, 8)
        covered = np.zeros(shape, dtype=int)
        for idx in tiles:
            assert idx.fits(shape)
            covered[idx.slices()] += 1
        assert covered.min() >= 1


def test_synthetic_scene_properties():
    cube = dc.synthetic_scene(16, 16, 20, seed=3)
    assert cube.shape == (16, 16, 20)
    assert cube.values.min() == 0.0 and cube.values.max() == 1.0
    again = dc.synthetic_scene(16, 16, 20, seed=3)
    np.testing.assert_array_equal(cube.values, again.values)
    # smooth spectra: neighbouring bands are far closer than random bands would be
    step = np.abs(np.diff(cube.values, axis=2)).mean()
    shuffled = np.random.default_rng(0).permutation(cube.values.ravel())
    assert step < 0.5 * np.abs(np.diff(shuffled)).mean()
