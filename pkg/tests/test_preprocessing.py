import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pscr.errors import BoundsError, DimensionError, ValidationError
from pscr.preprocessing import (
    NonOverlapGrid, OverlapSample, Resize, SamplerSpec, apply_preprocessor, coverage_report,
    format_preprocessor, nonoverlap_grid, parse_preprocessor, resize_bilinear, sample_patches,
)


def _brute_coverage(spec, side):
    counts = np.zeros((side, side), dtype=int)
    for i in spec.start_indices:
        for j in spec.start_indices:
            counts[i:i + spec.window, j:j + spec.window] += 1
    return np.count_nonzero(counts) / side ** 2, int(counts.max())


def test_sample_patches_512_224(rng):
    img = rng.random((3, 512, 512))
    ps = sample_patches(img, SamplerSpec((0, 150, 288), 224))
    assert len(ps) == 9
    assert ps.origins == [(i, j) for i in (0, 150, 288) for j in (0, 150, 288)]
    last = ps.patches[-1]
    assert last.shape == (3, 224, 224)
    assert np.array_equal(last, img[:, 288:512, 288:512])


def test_sample_patches_overlaps_299():
    spec = SamplerSpec((0, 100, 213), 299)
    ps = sample_patches(np.zeros((3, 512, 512)), spec)
    assert len(ps) == 9
    cols = sorted({c for _, c in ps.origins})
    assert [a + 299 - b for a, b in zip(cols, cols[1:])] == [199, 186]


def test_whole_image_window(rng):
    img = rng.random((3, 16, 16))
    ps = sample_patches(img, SamplerSpec((0,), 16))
    assert len(ps) == 1 and np.array_equal(ps.patches[0], img)


def test_patches_are_copies(rng):
    img = rng.random((1, 8, 8))
    ps = sample_patches(img, SamplerSpec((0, 4), 4))
    ps.patches[0][...] = -1
    assert img.min() >= 0


def test_sampler_validation():
    with pytest.raises(ValidationError, match="increasing"):
        SamplerSpec((0, 5, 5), 4)
    with pytest.raises(ValidationError, match="negative"):
        SamplerSpec((-1, 5), 4)
    with pytest.raises(ValidationError):
        SamplerSpec((), 4)
    with pytest.raises(ValidationError):
        SamplerSpec((0,), 0)


def test_bounds_error_names_start():
    with pytest.raises(BoundsError, match="start index 300"):
        sample_patches(np.zeros((3, 512, 512)), SamplerSpec((0, 300), 224))


def test_non_square_rejected():
    with pytest.raises(DimensionError, match="square"):
        sample_patches(np.zeros((3, 8, 10)), SamplerSpec((0,), 4))


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_every_patch_is_its_source_slice(data):
    side = data.draw(st.integers(1, 40))
    window = data.draw(st.integers(1, side))
    starts = sorted(data.draw(st.sets(st.integers(0, side - window), min_size=1, max_size=5)))
    spec = SamplerSpec(tuple(starts), window)
    img = np.random.default_rng(side * 7 + window).random((2, side, side))
    ps = sample_patches(img, spec)
    expected = [(i, j) for i in starts for j in starts]
    assert ps.origins == expected
    for patch, (i, j) in zip(ps.patches, ps.origins):
        assert np.array_equal(patch, img[:, i:i + window, j:j + window])


# ---- non-overlapping grid

def test_grid_tiles_and_reassembles(rng):
    img = rng.random((3, 64, 64))
    ps = nonoverlap_grid(img, 32)
    assert len(ps) == 4
    top = np.concatenate(ps.patches[:2], axis=2)
    bottom = np.concatenate(ps.patches[2:], axis=2)
    assert np.array_equal(np.concatenate([top, bottom], axis=1), img)


def test_grid_single_tile(rng):
    img = rng.random((3, 32, 32))
    ps = nonoverlap_grid(img, 32)
    assert len(ps) == 1 and np.array_equal(ps.patches[0], img)


def test_grid_needs_divisor():
    with pytest.raises(DimensionError, match="does not divide"):
        nonoverlap_grid(np.zeros((1, 10, 10)), 3)


# ---- resize

def test_resize_identity(rng):
    img = rng.random((3, 9, 9))
    np.testing.assert_allclose(resize_bilinear(img, 9), img, atol=1e-12)


def test_resize_constant():
    out = resize_bilinear(np.full((2, 5, 5), 0.7), 13)
    np.testing.assert_allclose(out, 0.7, atol=1e-14)


def test_resize_checkerboard_center():
    out = resize_bilinear(np.array([[[0.0, 1.0], [1.0, 0.0]]]), 3)
    assert out[0, 1, 1] == pytest.approx(0.5, abs=1e-15)
    # corners are preserved under corner alignment
    assert out[0, 0, 0] == 0.0 and out[0, 0, 2] == 1.0


def test_resize_matches_pointwise_formula(rng):
    img = rng.random((1, 4, 6))
    out = resize_bilinear(img, 5)

    def sample(y, x):
        y0, x0 = min(int(y), 2), min(int(x), 4)
        fy, fx = y - y0, x - x0
        a = img[0]
        return ((1 - fy) * (1 - fx) * a[y0, x0] + (1 - fy) * fx * a[y0, x0 + 1]
                + fy * (1 - fx) * a[y0 + 1, x0] + fy * fx * a[y0 + 1, x0 + 1])

    for r in range(5):
        for c in range(5):
            assert out[0, r, c] == pytest.approx(sample(r * 3 / 4, c * 5 / 4), abs=1e-12)


# ---- coverage

@pytest.mark.parametrize("starts,window,side", [
    ((0, 150, 288), 224, 512), ((0, 100, 213), 299, 512), ((0, 20), 10, 40), ((3, 9), 5, 16),
])
def test_coverage_matches_brute_force(starts, window, side):
    spec = SamplerSpec(starts, window)
    frac, mult = coverage_report(spec, side)
    bf_frac, bf_mult = _brute_coverage(spec, side)
    assert frac == pytest.approx(bf_frac, abs=1e-15)
    assert mult == bf_mult


def test_coverage_trivial():
    assert coverage_report(SamplerSpec((0,), 32), 32) == (1.0, 1)
    assert coverage_report(SamplerSpec((0,), 16), 32) == (0.25, 1)
    assert coverage_report(SamplerSpec((0, 150, 288), 224), 512)[0] == 1.0


# ---- preprocessor plumbing

@pytest.mark.parametrize("kind", [Resize(32), NonOverlapGrid(16), OverlapSample(SamplerSpec((0, 16, 32), 32))])
def test_preprocessor_text_round_trip(kind):
    assert parse_preprocessor(format_preprocessor(kind)) == kind


def test_parse_preprocessor_errors():
    with pytest.raises(ValidationError):
        parse_preprocessor("crop:3")
    with pytest.raises(ValidationError):
        parse_preprocessor("resize:abc")


def test_apply_preprocessor_shapes(rng):
    img = rng.random((3, 64, 64))
    assert apply_preprocessor(img, Resize(32)).shape == (1, 3, 32, 32)
    assert apply_preprocessor(img, NonOverlapGrid(16)).shape == (16, 3, 16, 16)
    assert apply_preprocessor(img, OverlapSample(SamplerSpec((0, 32), 32))).shape == (4, 3, 32, 32)
