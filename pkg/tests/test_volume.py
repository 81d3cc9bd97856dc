import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage

from foundation.core.errors import DegenerateInputError, InvalidArgumentError
from foundation.core.volume import (
    Box,
    Volume,
    centroid,
    crop_or_pad,
    isotropic_dims,
    morph_open,
    normalize,
    resample,
    signed_distance,
    sphere_element,
    threshold,
    tight_box,
)

from conftest import ellipsoid


def _linear(points):
    return 2.0 * points[0] + 3.0 * points[1] - points[2]


class TestVolume:
    def test_flat_order_is_x_fastest(self):
        v = Volume.from_flat(np.arange(24), (2, 3, 4), (1.0, 1.0, 1.0))
        assert v.data[1, 0, 0] == 1
        assert v.data[0, 1, 0] == 2
        assert v.data[0, 0, 1] == 6
        assert_array_equal(v.flat(), np.arange(24))

    def test_data_is_read_only(self):
        v = Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_input_array_not_aliased(self):
        raw = np.zeros((2, 2, 2))
        v = Volume(raw, (1.0, 1.0, 1.0))
        raw[0, 0, 0] = 5.0
        assert v.data[0, 0, 0] == 0.0

    @pytest.mark.parametrize("spacing", [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, float("nan"))])
    def test_bad_spacing_rejected(self, spacing):
        with pytest.raises(InvalidArgumentError):
            Volume(np.zeros((2, 2, 2)), spacing)

    def test_zeros_is_centred(self):
        v = Volume.zeros((4, 5, 6), (1.0, 2.0, 0.5), center=(10.0, 0.0, -3.0))
        assert_allclose(v.center, (10.0, 0.0, -3.0))


class TestResample:
    def test_linear_field_reproduced(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            spacing = tuple(rng.uniform(0.5, 2.0, 3))
            src = Volume.zeros((12, 10, 9), spacing, center=tuple(rng.uniform(-5, 5, 3)))
            src = src.with_data(_linear(src.physical_points()))
            half = tuple(s / 2 for s in spacing)
            out = resample(src, half, (8, 8, 8), src.center, order=1)
            assert_allclose(out.data, _linear(out.physical_points()), atol=1e-5)

    def test_outside_support_reads_zero(self):
        src = Volume(np.ones((4, 4, 4)), (1.0, 1.0, 1.0))
        out = resample(src, (1.0, 1.0, 1.0), (4, 4, 4), (100.0, 100.0, 100.0))
        assert not out.data.any()

    def test_isotropic_dims(self):
        v = Volume.zeros((96, 96, 56), (1.5, 1.5, 1.5))
        assert isotropic_dims(v, 1.0) == (144, 144, 84)

    def test_crop_or_pad(self):
        data = np.random.default_rng(1).random((130, 128, 70))
        v = Volume(data, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
        out = crop_or_pad(v, (128, 128, 72))
        assert out.dims == (128, 128, 72)
        assert_allclose(out.origin, (1.0, 0.0, -1.0))
        assert_array_equal(out.data[:, :, 1:71], data[1:129, :, :])
        assert not out.data[:, :, 0].any()
        assert not out.data[:, :, 71].any()

    def test_odd_crop_keeps_extra_voxel_high(self):
        v = Volume(np.arange(5.0)[:, None, None] * np.ones((5, 1, 1)), (1.0, 1.0, 1.0))
        out = crop_or_pad(v, (2, 1, 1))
        assert_array_equal(out.data[:, 0, 0], [1.0, 2.0])


class TestIntensity:
    def test_normalize(self):
        v = Volume(np.random.default_rng(2).normal(5.0, 3.0, (6, 6, 6)), (1.0, 1.0, 1.0))
        n = normalize(v)
        assert abs(n.data.mean()) < 1e-12
        assert abs(n.data.std() - 1.0) < 1e-12

    def test_normalize_constant_fails(self):
        with pytest.raises(DegenerateInputError):
            normalize(Volume(np.full((3, 3, 3), 7.0), (1.0, 1.0, 1.0)))

    def test_threshold_inclusive(self):
        p = Volume(np.array([0.49, 0.5, 0.51]).reshape(3, 1, 1), (1.0, 1.0, 1.0))
        assert_array_equal(threshold(p, 0.5).data.ravel(), [0, 1, 1])

    def test_threshold_matches_comparison(self):
        data = np.random.default_rng(3).random((7, 6, 5))
        m = threshold(Volume(data, (1.0, 1.0, 1.0)), 0.5)
        assert m.data.dtype == np.uint8
        assert_array_equal(m.data, (data >= 0.5).astype(np.uint8))

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.2])
    def test_threshold_range(self, t):
        with pytest.raises(InvalidArgumentError):
            threshold(Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)), t)


def _brute_force_sdf(fg, spacing):
    idx = np.argwhere(np.ones_like(fg))
    pts = idx * np.asarray(spacing)
    half = min(spacing) / 2.0
    out = np.zeros(fg.shape)
    inside, outside = pts[fg.ravel()], pts[~fg.ravel()]
    for p, i in zip(pts, idx):
        other = outside if fg[tuple(i)] else inside
        d = np.sqrt(((other - p) ** 2).sum(axis=1)).min()
        out[tuple(i)] = -(d - half) if fg[tuple(i)] else d - half
    return out


class TestSignedDistance:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        spacing = (1.0, 1.5, 2.0)
        fg = rng.random((6, 5, 4)) < 0.4
        sdf = signed_distance(Volume(fg.astype(np.uint8), spacing))
        assert_allclose(sdf.data, _brute_force_sdf(fg, spacing), atol=1e-9)

    def test_single_voxel(self):
        fg = np.zeros((5, 5, 5), dtype=np.uint8)
        fg[2, 2, 2] = 1
        sdf = signed_distance(Volume(fg, (1.0, 1.0, 1.0)))
        assert sdf.data[2, 2, 2] <= 0
        for dx, dy, dz in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
            assert sdf.data[2 + dx, 2 + dy, 2 + dz] == pytest.approx(0.5)

    def test_sphere_centre(self):
        m = ellipsoid((31, 31, 31), 1.0, (10.0, 10.0, 10.0))
        sdf = signed_distance(m)
        assert abs(sdf.data[15, 15, 15] + 10.0) <= np.sqrt(3.0)

    def test_complement_flips_sign(self):
        m = ellipsoid((15, 13, 11), 1.0, (5.0, 4.0, 3.0))
        comp = m.with_data(1 - m.data)
        assert_allclose(signed_distance(comp).data, -signed_distance(m).data)

    @pytest.mark.parametrize("value", [0, 1])
    def test_single_class_fails(self, value):
        with pytest.raises(DegenerateInputError):
            signed_distance(Volume(np.full((3, 3, 3), value, dtype=np.uint8), (1.0, 1.0, 1.0)))


def _brute_force_open(fg, structure):
    n = fg.shape
    c = np.array(structure.shape) // 2
    offsets = [np.array(o) - c for o in np.argwhere(structure)]

    def inside(p):
        return all(0 <= p[a] < n[a] for a in range(3))

    eroded = np.zeros_like(fg)
    for p in itertools.product(*(range(k) for k in n)):
        p = np.array(p)
        eroded[tuple(p)] = all(inside(p + o) and fg[tuple(p + o)] for o in offsets)
    opened = np.zeros_like(fg)
    for p in np.argwhere(eroded):
        for o in offsets:
            q = p + o
            if inside(q):
                opened[tuple(q)] = True
    return opened


class TestMorphology:
    def test_sphere_element_dims(self):
        elem = sphere_element(2.0, (1.0, 1.0, 2.0))
        assert elem.dims == (5, 5, 3)
        assert elem.data[2, 2, 1] == 1
        assert elem.data[0, 0, 0] == 0

    def test_open_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for radius in (1.0, 1.5):
            elem = sphere_element(radius, (1.0, 1.0, 1.0))
            for _ in range(10):
                fg = rng.random((7, 6, 6)) < 0.7
                opened = morph_open(Volume(fg.astype(np.uint8), (1.0, 1.0, 1.0)), elem)
                assert_array_equal(opened.data.astype(bool), _brute_force_open(fg, elem.data.astype(bool)))

    @pytest.mark.parametrize("spacing", [(1.0, 1.0, 1.0), (1.0, 1.0, 2.0), (0.8, 1.2, 1.5)])
    def test_two_mm_open_matches_brute_force(self, spacing):
        rng = np.random.default_rng(6)
        elem = sphere_element(2.0, spacing)
        structure = elem.data.astype(bool)
        for level in (-0.03, 0.0, 0.03):
            # smoothed noise gives blobs thick enough to survive a 2 mm erosion
            fg = ndimage.gaussian_filter(rng.normal(size=(16, 16, 16)), 1.5) > level
            opened = morph_open(Volume(fg.astype(np.uint8), spacing), elem)
            assert_array_equal(opened.data.astype(bool), _brute_force_open(fg, structure))
        fg = rng.random((16, 16, 16)) < 0.9
        opened = morph_open(Volume(fg.astype(np.uint8), spacing), elem)
        assert_array_equal(opened.data.astype(bool), _brute_force_open(fg, structure))

    def test_two_mm_element_on_unit_grid(self):
        assert int(sphere_element(2.0, (1.0, 1.0, 1.0)).data.sum()) == 33

    def test_large_cube_interior_kept(self):
        fg = np.zeros((20, 20, 20), dtype=np.uint8)
        fg[4:16, 4:16, 4:16] = 1
        opened = morph_open(Volume(fg, (1.0, 1.0, 1.0)), sphere_element(2.0, (1.0, 1.0, 1.0)))
        assert np.all(opened.data <= fg)
        assert np.all(opened.data[6:14, 6:14, 6:14] == 1)
        assert opened.data[4, 4, 4] == 0

    def test_open_empty_mask(self):
        m = Volume(np.zeros((4, 4, 4), dtype=np.uint8), (1.0, 1.0, 1.0))
        assert not morph_open(m, sphere_element(1.0, (1.0, 1.0, 1.0))).data.any()


class TestShapeMeasures:
    def test_sphere_box(self):
        box = tight_box(ellipsoid((31, 31, 31), 1.0, (10.0, 10.0, 10.0)))
        assert_allclose(box.size, (20.0, 20.0, 20.0), atol=1.0)

    def test_empty_box_fails(self):
        with pytest.raises(DegenerateInputError):
            tight_box(Volume(np.zeros((3, 3, 3), dtype=np.uint8), (1.0, 1.0, 1.0)))

    def test_box_helpers(self):
        box = Box((0.0, 0.0, 0.0), (10.0, 4.0, 2.0))
        assert box.center == (5.0, 2.0, 1.0)
        assert box.expanded(5.0).size == (20.0, 14.0, 12.0)

    def test_centroid(self):
        m = ellipsoid((21, 21, 21), 1.0, (4.0, 4.0, 4.0), center=(3.0, -2.0, 1.0))
        assert_allclose(centroid(m), (3.0, -2.0, 1.0), atol=1e-9)
