import math
from unittest import TestCase, mock

import numpy as np
from scipy import stats
from scipy.spatial.transform import Rotation

from vsadapt import preprocess
from vsadapt.errors import ArgumentError, StageError, ValidationError
from vsadapt.preprocess import AffineTransform, CropRegion, PreprocessOptions, RegistrationOptions
from vsadapt.volume import Interpolation, Modality, Volume
import tests.unit.helpers as helpers


def gaussian_blob(shape, center, sigma=(2.0, 3.0, 2.5), spacing=(1.0, 1.0, 1.0), modality=Modality.T2):
    axes = [np.arange(n) * s for n, s in zip(shape, spacing)]
    z, y, x = np.meshgrid(*axes, indexing='ij')
    data = np.exp(-0.5 * (((z - center[0]) / sigma[0]) ** 2 + ((y - center[1]) / sigma[1]) ** 2
                          + ((x - center[2]) / sigma[2]) ** 2))
    return Volume(data=data.astype(np.float32), spacing=spacing, modality=modality)


BLOBS = (((4.0, 6.0, 7.0), (1.5, 2.0, 2.5), 1.0), ((8.0, 13.0, 9.0), (2.0, 3.0, 1.5), 0.7),
         ((5.0, 9.0, 15.0), (1.2, 1.5, 2.0), 0.5), ((9.0, 5.0, 14.0), (1.0, 1.2, 1.2), 0.9))


def render_blobs(points):
    """Sum of anisotropic Gaussians evaluated at physical `points` (N, 3)."""
    out = np.zeros(len(points))
    for center, sigma, weight in BLOBS:
        out += weight * np.exp(-0.5 * (((points - np.asarray(center)) / np.asarray(sigma)) ** 2).sum(axis=1))
    return out


def grid_points(shape, spacing):
    index = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing='ij'), axis=-1).reshape(-1, 3)
    return index * np.asarray(spacing)


def random_affine(rng, center):
    rotation = Rotation.from_rotvec(rng.uniform(-0.1, 0.1, 3)).as_matrix()
    shear = np.eye(3)
    shear[0, 1], shear[0, 2], shear[1, 2] = rng.uniform(-0.04, 0.04, 3)
    matrix = rotation @ shear @ np.diag(np.exp(rng.uniform(-0.05, 0.05, 3)))
    return AffineTransform(matrix, center - matrix @ center + rng.uniform(-2.0, 2.0, 3))


def corner_error_voxels(estimate, truth, shape, spacing):
    corners = np.array([[i, j, k] for i in (0, shape[0] - 1) for j in (0, shape[1] - 1) for k in (0, shape[2] - 1)],
                       dtype=float) * np.asarray(spacing)
    return float(np.max(np.abs(estimate.apply_points(corners) - truth.apply_points(corners)) / np.asarray(spacing)))


class TestHistogramMatch(TestCase):

    def test_monotone_remap_is_undone(self) -> None:
        rng = np.random.default_rng(0)
        reference = Volume(data=rng.uniform(0, 1, (16, 16, 16)).astype(np.float32), spacing=(1, 1, 1))
        moving = reference.with_data(np.asarray(reference.data) * 3.0 + 7.0)
        out = preprocess.histogram_match(moving, reference)
        np.testing.assert_allclose(out.data, reference.data, atol=0.02)

    def test_output_is_monotone(self) -> None:
        moving = helpers.make_volume((4, 8, 8), seed=1)
        reference = helpers.make_volume((4, 8, 8), seed=2)
        out = preprocess.histogram_match(moving, reference)
        order = np.argsort(np.asarray(moving.data).ravel(), kind='stable')
        self.assertTrue(np.all(np.diff(np.asarray(out.data).ravel()[order]) >= -1e-6))

    def test_constant_maps_to_median(self) -> None:
        reference = helpers.make_volume((4, 8, 8), seed=3)
        moving = reference.with_data(np.full(reference.shape, 5.0, dtype=np.float32))
        out = preprocess.histogram_match(moving, reference, n_quantiles=1001)
        self.assertAlmostEqual(float(out.data[0, 0, 0]), float(np.median(reference.data)), places=2)

    def test_invalid(self) -> None:
        v = helpers.make_volume((2, 4, 4))
        constant = v.with_data(np.zeros(v.shape, dtype=np.float32))
        self.assertRaises(ValidationError, preprocess.histogram_match, v, constant)
        self.assertRaises(ArgumentError, preprocess.histogram_match, v, v, 1)

    # Two-sample KS distance between the matched volume and the reference stays within 2 / n_quantiles
    def test_matched_distribution_close_to_reference(self) -> None:
        rng = np.random.default_rng(12)
        reference = Volume(data=rng.gamma(2.0, 1.5, (20, 32, 32)).astype(np.float32), spacing=(1, 1, 1))
        moving = Volume(data=rng.normal(5.0, 2.0, (16, 32, 32)).astype(np.float32), spacing=(1, 1, 1))
        for n_quantiles in (32, 64, 256):
            out = preprocess.histogram_match(moving, reference, n_quantiles=n_quantiles)
            statistic = stats.ks_2samp(np.asarray(out.data).ravel(), np.asarray(reference.data).ravel()).statistic
            self.assertLessEqual(statistic, 2.0 / n_quantiles)


class TestSimilarity(TestCase):

    # MI is computed on ranks, so strictly monotone remaps of either input leave it unchanged
    def test_mi_rank_invariant(self) -> None:
        rng = np.random.default_rng(4)
        a = rng.normal(size=2000)
        b = a + 0.5 * rng.normal(size=2000)
        self.assertAlmostEqual(preprocess.mutual_information(a, b),
                               preprocess.mutual_information(a ** 3, np.exp(b)), places=12)

    def test_mi_of_independent_is_small(self) -> None:
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=20000), rng.normal(size=20000)
        self.assertLess(preprocess.mutual_information(a, b, bins=8), 0.01)
        self.assertGreater(preprocess.mutual_information(a, a, bins=8), 1.5)

    def test_ncc(self) -> None:
        a = np.arange(10.0)
        self.assertAlmostEqual(preprocess.normalized_cross_correlation(a, 2 * a + 1), 1.0)
        self.assertAlmostEqual(preprocess.normalized_cross_correlation(a, -a), -1.0)
        self.assertTrue(math.isnan(preprocess.normalized_cross_correlation(a, np.ones(10))))


class TestAffine(TestCase):

    def test_inverse_and_compose(self) -> None:
        t = AffineTransform(np.array([[1.1, 0.1, 0.0], [0.0, 0.9, 0.2], [0.0, 0.0, 1.0]]), np.array([1.0, -2.0, 0.5]))
        both = t.compose(t.inverse())
        np.testing.assert_allclose(both.matrix, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(both.translation, np.zeros(3), atol=1e-12)
        restored = AffineTransform.from_dict(t.to_dict())
        np.testing.assert_allclose(restored.matrix, t.matrix)
        points = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
        np.testing.assert_allclose(t.inverse().apply_points(t.apply_points(points)), points, atol=1e-12)
        np.testing.assert_allclose(t.apply_points(points[:1]), [[1.0, -2.0, 0.5]])

    def test_singular_rejected(self) -> None:
        self.assertRaises(ArgumentError, AffineTransform, np.zeros((3, 3)))

    def test_identity_keeps_data(self) -> None:
        v = helpers.make_volume((3, 5, 5))
        out = preprocess.apply_affine(v, AffineTransform.identity())
        np.testing.assert_allclose(out.data, v.data, atol=1e-6)

    # y = x + 1 mm along columns: each output voxel reads the input one column to the left
    def test_translation_shifts_voxels(self) -> None:
        v = helpers.make_volume((2, 3, 6))
        out = preprocess.apply_affine(v, AffineTransform(np.eye(3), np.array([0.0, 0.0, 1.0])), background=-5.0)
        np.testing.assert_allclose(out.data[..., 1:], v.data[..., :-1], atol=1e-6)
        np.testing.assert_array_equal(out.data[..., 0], -5.0)

    def test_nearest_keeps_labels(self) -> None:
        mask = helpers.box_mask((4, 8, 8), (1, 2, 2), (3, 6, 6), label=2)
        grid = Volume(data=mask, spacing=(1, 1, 1))
        t = AffineTransform(np.diag([1.0, 1.2, 0.9]), np.array([0.0, 0.3, -0.4]))
        out = preprocess.apply_affine(grid, t, Interpolation.NEAREST)
        self.assertTrue(set(np.unique(out.data)) <= {0, 2})


class TestRegistration(TestCase):

    # A translated copy is brought back within half a voxel
    def test_recovers_translation(self) -> None:
        shape, center = (12, 24, 24), np.array([5.5, 11.5, 11.5])
        shift = np.array([0.0, 2.0, -1.5])
        atlas = gaussian_blob(shape, center)
        moving = gaussian_blob(shape, center + shift)
        opts = RegistrationOptions(levels=(2, 1), dof='translation', max_evaluations=300)
        t = preprocess.register_affine(moving, atlas, preprocess.NCC, opts)
        np.testing.assert_allclose(t.translation, -shift, atol=0.5)
        before = preprocess.similarity(moving, atlas, preprocess.NCC)
        after = preprocess.similarity(moving, atlas, preprocess.NCC, t)
        self.assertGreater(after, before)

    # A volume registered to itself stays where it is
    def test_self_registration_is_identity(self) -> None:
        atlas = gaussian_blob((8, 16, 16), (3.2, 7.1, 6.8), modality=Modality.T1)
        opts = RegistrationOptions(levels=(2, 1), dof='rigid', max_evaluations=50)
        t = preprocess.register_affine(atlas, atlas, preprocess.MI, opts)
        np.testing.assert_allclose(t.matrix, np.eye(3), atol=0.05)
        np.testing.assert_allclose(t.translation, np.zeros(3), atol=0.5)

    # Seeded random affines: at least 38 of 40 recovered within 2 voxels at every grid corner
    def test_recovers_random_affines(self) -> None:
        shape, spacing = (14, 20, 20), (1.0, 1.0, 1.0)
        points = grid_points(shape, spacing)
        atlas = Volume(data=render_blobs(points).reshape(shape).astype(np.float32), spacing=spacing)
        center = (np.asarray(shape) - 1) / 2.0 * np.asarray(spacing)
        opts = RegistrationOptions(levels=(2, 1), dof='affine', max_evaluations=1500)
        rng = np.random.default_rng(40)
        errors_before, errors_after = [], []
        for _ in range(40):
            truth = random_affine(rng, center)
            moving = atlas.with_data(render_blobs(truth.apply_points(points)).reshape(shape).astype(np.float32))
            estimate = preprocess.register_affine(moving, atlas, preprocess.NCC, opts)
            errors_before.append(corner_error_voxels(AffineTransform.identity(), truth, shape, spacing))
            errors_after.append(corner_error_voxels(estimate, truth, shape, spacing))
        self.assertGreaterEqual(sum(e <= 2.0 for e in errors_after), 38)
        self.assertLess(np.mean(errors_after), np.mean(errors_before))

    def test_invalid_options(self) -> None:
        v = gaussian_blob((4, 8, 8), (2, 4, 4))
        self.assertRaises(ArgumentError, preprocess.register_affine, v, v, preprocess.MI,
                          RegistrationOptions(dof='spline'))
        self.assertRaises(ArgumentError, preprocess.register_affine, v, v, 'SSD', RegistrationOptions(levels=(1,)))


class TestCrop(TestCase):

    def test_crop_inside(self) -> None:
        v = helpers.make_volume((4, 6, 8), spacing=(2.0, 1.0, 0.5))
        out = preprocess.crop_fixed(v, CropRegion((1, 2, 3), (2, 3, 4)))
        np.testing.assert_array_equal(out.data, np.asarray(v.data)[1:3, 2:5, 3:7])
        self.assertEqual(out.origin, (2.0, 2.0, 1.5))

    def test_crop_pads_outside(self) -> None:
        v = helpers.make_volume((2, 2, 2))
        out = preprocess.crop_fixed(v, CropRegion((-1, 0, 0), (4, 2, 2)), background=9.0)
        np.testing.assert_array_equal(out.data[0], 9.0)
        np.testing.assert_array_equal(out.data[3], 9.0)
        np.testing.assert_array_equal(out.data[1:3], v.data)
        self.assertEqual(out.origin[0], -1.0)

    def test_covering_region(self) -> None:
        a = helpers.box_mask((10, 10, 10), (2, 3, 4), (4, 5, 6))
        b = helpers.box_mask((10, 10, 10), (5, 3, 1), (6, 4, 2))
        region = preprocess.covering_region([a, b], margin=1)
        self.assertEqual(region.start, (1, 2, 0))
        self.assertEqual(region.size, (6, 4, 7))
        fixed = preprocess.covering_region([a, b], size=(4, 4, 4))
        self.assertEqual(fixed.size, (4, 4, 4))
        self.assertRaises(ArgumentError, preprocess.covering_region, [np.zeros((3, 3, 3))])

    def test_centered_region(self) -> None:
        self.assertEqual(preprocess.centered_region((10, 20, 20), (4, 8, 30)).start, (3, 6, -5))


class TestPreprocessCase(TestCase):

    def setUp(self) -> None:
        self.atlas = helpers.make_volume((4, 16, 16), modality=Modality.T1, seed=10)
        self.case = helpers.make_case(shape=(4, 16, 16), seed=11)
        self.opts = PreprocessOptions(target_spacing=(1.0, 1.0, 1.0), crop_size=(4, 12, 12),
                                      registration=RegistrationOptions(levels=(1,), max_evaluations=20))
        return super().setUp()

    def test_given_transform_skips_registration(self) -> None:
        with mock.patch.object(preprocess, 'register_affine') as register:
            out = preprocess.align_case(self.case, self.atlas, self.opts, transform=AffineTransform.identity())
        register.assert_not_called()
        self.assertEqual(out.metadata['affine'], AffineTransform.identity().to_dict())
        np.testing.assert_array_equal(out.vs_mask, self.case.vs_mask)

    def test_full_pipeline(self) -> None:
        with mock.patch.object(preprocess, 'register_affine', return_value=AffineTransform.identity()):
            out = preprocess.preprocess_case(self.case, self.atlas, self.opts)
        self.assertEqual(out.image.shape, (4, 12, 12))
        self.assertEqual(out.vs_mask.shape, (4, 12, 12))
        self.assertGreaterEqual(float(out.image.data.min()), -1.0)
        self.assertLessEqual(float(out.image.data.max()), 1.0)
        self.assertEqual(out.metadata['crop'], {'start': [0, 2, 2], 'size': [4, 12, 12]})
        self.assertEqual(out.koos_grade, self.case.koos_grade)
        # Tumor box at rows/cols 4..7 moves by the crop offset of 2
        np.testing.assert_array_equal(out.vs_mask[1:3, 2:6, 2:6], 1)

    def test_atlas_spacing_must_match(self) -> None:
        opts = PreprocessOptions(target_spacing=(1.0, 0.5, 0.5))
        self.assertRaises(ArgumentError, preprocess.preprocess_case, self.case, self.atlas, opts)

    def test_missing_similarity_is_stage_error(self) -> None:
        opts = PreprocessOptions(target_spacing=(1.0, 1.0, 1.0), similarity={'T2': preprocess.NCC})
        with self.assertRaises(StageError) as ctx:
            preprocess.align_case(self.case, self.atlas, opts)
        self.assertEqual(ctx.exception.stage, 'register')
