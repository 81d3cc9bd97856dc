import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from foundation.core.config import GeometryConfig
from foundation.core.errors import CorruptFileError, InsufficientDataError
from foundation.core.checkpoint import load_arrays, save_arrays
from foundation.core.volume import Volume, centroid, tight_box
from twostage.phantoms import make_phantoms
from twostage.pipeline import dice_hard
from twostage.shapemodel import (
    Pose,
    ShapeModel,
    alignment,
    build,
    canonical_grid,
    canonical_sdf,
    instance,
    normalized_box_mm,
    project,
    sample_coeffs,
    sdf,
)

from conftest import ellipsoid, small_geometry, superellipsoid

def _training_sdfs(model, masks):
    return np.stack([canonical_sdf(m, model.box_mm, model.grid, model.band_mm).data.ravel() for m in masks])

@pytest.fixture(scope="module")
def default_model():
    """Full-resolution canonical grid, masks covering the default field of view at 2 mm"""
    phantoms = make_phantoms(12, np.random.default_rng(5), (64, 64, 36), 2.0)
    return build([m for _, m in phantoms])

class TestCanonicalFrame:
    def test_normalized_box(self):
        assert normalized_box_mm() == (80.0, 80.0, 48.0)
        assert normalized_box_mm(small_geometry()) == (80.0, 80.0, 48.0)
        assert canonical_grid(small_geometry()).dims == (24, 24, 16)

    def test_alignment(self):
        mask = ellipsoid((40, 40, 30), 2.0, (20.0, 16.0, 12.0), center=(4.0, -2.0, 0.0))
        pose = alignment(mask, (80.0, 80.0, 48.0))
        assert_allclose(pose.translation, centroid(mask), atol=1e-9)
        assert_allclose(pose.scale, (np.asarray(tight_box(mask).size) + 2.0) / (80.0, 80.0, 48.0))

    def test_pose_round_trip(self):
        pose = Pose((2.0, 1.0, 0.5), (10.0, 0.0, -4.0))
        q = pose.to_canonical(np.array([[12.0], [3.0], [-4.0]]))
        assert_allclose(q.ravel(), [1.0, 3.0, 0.0])

    def test_pose_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            Pose((1.0, 0.0, 1.0))

class TestBuild:
    def test_needs_three_masks(self):
        m = ellipsoid((32, 32, 18), 4.0, (24.0, 20.0, 16.0))
        with pytest.raises(InsufficientDataError):
            build([m, m], geometry=small_geometry())

    def test_identical_masks_have_no_modes(self):
        m = ellipsoid((32, 32, 18), 4.0, (24.0, 20.0, 16.0))
        model = build([m] * 5, geometry=small_geometry())
        assert model.num_modes == 0
        expected = canonical_sdf(m, model.box_mm, model.grid, model.band_mm)
        assert_allclose(model.mean_sdf.data, expected.data, atol=1e-9)
        assert_array_equal(sdf(model, np.zeros(0)).data, model.mean_sdf.data)

    def test_modes(self, small_model, small_phantoms):
        model = small_model
        assert 1 <= model.num_modes <= min(15, len(small_phantoms) - 1)
        assert np.all(np.diff(model.eigenvalues) <= 1e-9)
        cumulative = model.explained_variance_ratio.sum()
        assert cumulative >= 0.95 - 1e-9 or model.num_modes == len(small_phantoms) - 1
        flat = model.components.reshape(model.num_modes, -1)
        assert_allclose(flat @ flat.T, np.eye(model.num_modes), atol=1e-8)
        assert model.training_shapes == len(small_phantoms)

    def test_mode_cap(self, small_phantoms):
        model = build([m for _, m in small_phantoms], m_max=1, geometry=small_geometry())
        assert model.num_modes == 1

class TestProjection:
    def test_training_scores_match_pca(self, small_model, small_phantoms):
        masks = [m for _, m in small_phantoms]
        X = _training_sdfs(small_model, masks)
        U, S, _ = np.linalg.svd(X - X.mean(axis=0), full_matrices=False)
        scores = U[:, :small_model.num_modes] * S[:small_model.num_modes]
        projected = np.stack([project(small_model, m) for m in masks])
        assert_allclose(np.abs(projected), np.abs(scores), rtol=1e-6, atol=1e-6)

    def test_projection_reduces_residual(self, small_model, small_phantoms):
        mask = small_phantoms[0][1]
        target = canonical_sdf(mask, small_model.box_mm, small_model.grid, small_model.band_mm).data
        fitted = sdf(small_model, project(small_model, mask)).data
        assert np.linalg.norm(target - fitted) <= np.linalg.norm(target - small_model.mean_sdf.data) + 1e-9

    def test_mean_shape_projects_to_zero(self, default_model):
        mean = instance(default_model, None, Pose(), default_model.grid)
        b = project(default_model, mean)
        assert np.linalg.norm(b) < 0.1 * np.sqrt(default_model.eigenvalues[0])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_instance_round_trip(self, default_model, seed):
        b = sample_coeffs(default_model, np.random.default_rng(seed))
        recovered = project(default_model, instance(default_model, b, Pose(), default_model.grid))
        tolerance = 0.05 * np.linalg.norm(b) + 0.1 * np.sqrt(default_model.eigenvalues[0])
        assert np.linalg.norm(recovered - b) < tolerance

    def test_sdf_is_clipped_to_band(self, default_model):
        assert default_model.band_mm == GeometryConfig().sdf_band_mm
        assert np.abs(default_model.mean_sdf.data).max() <= default_model.band_mm + 1e-9

class TestInstance:
    def test_mean_shape_on_canonical_grid(self, small_model):
        m = instance(small_model, None, Pose(), small_model.grid)
        mean = small_model.mean_sdf.data
        differs = m.data != (mean < 0)
        # only voxels sitting on the zero level set may flip
        assert np.all(np.abs(mean[differs]) < 1e-6)
        assert m.data.any()

    def test_deterministic(self, small_model):
        b = sample_coeffs(small_model, np.random.default_rng(0))
        target = Volume.zeros((40, 40, 24), (3.0, 3.0, 3.0))
        assert_array_equal(instance(small_model, b, Pose(), target).data,
                           instance(small_model, b, Pose(), target).data)

    def test_doubling_x_scale_doubles_extent(self, small_model):
        target = Volume.zeros((128, 64, 40), (2.0, 2.0, 2.0))
        one = tight_box(instance(small_model, None, Pose(), target)).size
        two = tight_box(instance(small_model, None, Pose((2.0, 1.0, 1.0)), target)).size
        assert abs(two[0] - 2.0 * one[0]) <= 3 * 2.0
        assert_allclose(two[1:], one[1:], atol=2 * 2.0)

class TestSampling:
    def test_within_bounds(self, small_model):
        rng = np.random.default_rng(1)
        bound = small_model.coeff_bounds(2.0)
        draws = np.stack([sample_coeffs(small_model, rng) for _ in range(10000)])
        assert np.all(np.abs(draws) <= bound)

    def test_zero_spread(self, small_model):
        assert not sample_coeffs(small_model, np.random.default_rng(0), spread=0.0).any()

    def test_zero_eigenvalue_gives_zero_coefficient(self, small_model):
        model = ShapeModel(
            mean_sdf=small_model.mean_sdf,
            components=small_model.components[:1].repeat(2, axis=0),
            eigenvalues=np.array([4.0, 0.0]),
            mean_scale=small_model.mean_scale,
            box_mm=small_model.box_mm,
        )
        draws = np.stack([sample_coeffs(model, np.random.default_rng(s)) for s in range(20)])
        assert not draws[:, 1].any()
        assert draws[:, 0].any()

class TestPersistence:
    def test_round_trip(self, small_model, tmp_path):
        small_model.save(tmp_path / "shape.model")
        back = ShapeModel.load(tmp_path / "shape.model")
        assert back.mean_sdf.same_grid(small_model.mean_sdf)
        assert_array_equal(back.mean_sdf.data, small_model.mean_sdf.data)
        assert_array_equal(back.components, small_model.components)
        assert_array_equal(back.eigenvalues, small_model.eigenvalues)
        assert back.mean_scale == small_model.mean_scale
        assert back.box_mm == small_model.box_mm
        assert back.band_mm == small_model.band_mm

    def test_missing_entry(self, small_model, tmp_path):
        small_model.save(tmp_path / "shape.model")
        arrays = load_arrays(tmp_path / "shape.model")
        del arrays["mean_scale"]
        save_arrays(tmp_path / "broken.model", arrays)
        with pytest.raises(CorruptFileError, match="mean_scale"):
            ShapeModel.load(tmp_path / "broken.model")

@pytest.mark.slow
class TestOneParameterFamily:
    def test_first_mode_dominates(self):
        model = build([superellipsoid(p) for p in np.linspace(2.0, 4.0, 20)], geometry=small_geometry())
        assert model.explained_variance_ratio[0] > 0.9

    def test_held_out_round_trip(self):
        exponents = np.linspace(2.0, 4.0, 21)
        model = build([superellipsoid(p) for p in np.delete(exponents, 10)], geometry=small_geometry())
        mask = superellipsoid(exponents[10])
        recovered = instance(model, project(model, mask), alignment(mask, model.box_mm), mask)
        assert dice_hard(recovered, mask) > 0.9
