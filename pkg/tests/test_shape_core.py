import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asmkit.errors import (
    DegenerateShape,
    FormatError,
    InsufficientData,
    ParamMismatch,
    RetentionUnsatisfiable,
    ShapeMismatch,
)
from asmkit.shape_core import (
    Shape,
    ShapeModel,
    SimilarityTransform,
    align_shapes,
    asm_transform,
    build_shape_model,
    clamp_params,
    deserialize_model,
    project,
    reconstruct,
    reconstruction_rms,
    serialize_model,
    similarity_fit,
)

SQUARE = Shape([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def rotated_about_centroid(shape, degrees, scale=1.0, shift=(0.0, 0.0)):
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    centre = shape.points.mean(axis=0)
    pts = scale * (shape.points - centre) @ rot.T + centre + np.asarray(shift)
    return Shape(pts)


def random_shapes(rng, count, n_points):
    return [Shape(rng.normal(0.0, 1.0, (n_points, 2))) for _ in range(count)]


class TestShape:
    def test_flat_layout_interleaves_x_y(self):
        s = Shape([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        assert np.array_equal(s.flat, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        assert Shape.from_flat(s.flat).n_points == 3

    def test_rejects_fewer_than_three_points(self):
        with pytest.raises(ShapeMismatch):
            Shape([[0.0, 0.0], [1.0, 1.0]])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Shape([[0.0, 0.0], [1.0, np.nan], [2.0, 2.0]])

    def test_points_are_read_only(self):
        s = Shape([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ValueError):
            s.points[0, 0] = 5.0


class TestSimilarityFit:
    def test_identity_for_equal_shapes(self):
        t = similarity_fit(SQUARE, SQUARE)
        assert t.scale == 1.0
        assert t.rotation == 0.0
        assert t.translation == (0.0, 0.0)

    def test_recovers_pure_rotation(self):
        target = rotated_about_centroid(SQUARE, 30.0)
        t = similarity_fit(SQUARE, target)
        assert abs(t.rotation - math.radians(30.0)) < 1e-9
        assert abs(t.scale - 1.0) < 1e-9

    def test_recovers_scale_and_translation(self):
        target = Shape(2.0 * SQUARE.points + np.array([5.0, -3.0]))
        t = similarity_fit(SQUARE, target)
        assert abs(t.scale - 2.0) < 1e-9
        assert abs(t.rotation) < 1e-9
        assert np.allclose(t.translation, (5.0, -3.0), atol=1e-9)

    def test_least_squares_against_noisy_target(self):
        rng = np.random.default_rng(11)
        truth = SimilarityTransform(1.4, 0.6, (2.0, -1.0))
        target = Shape(truth.apply(SQUARE.points) + rng.normal(0, 1e-3, (4, 2)))
        fit = similarity_fit(SQUARE, target)
        assert abs(fit.scale - truth.scale) < 1e-2
        assert abs(fit.rotation - truth.rotation) < 1e-2

    def test_degenerate_source_rejected(self):
        flat = Shape([[1.0, 1.0]] * 4)
        with pytest.raises(DegenerateShape):
            similarity_fit(flat, SQUARE)

    def test_point_count_mismatch(self):
        tri = Shape([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        with pytest.raises(ShapeMismatch):
            similarity_fit(tri, SQUARE)

    def test_apply_then_invert_round_trips(self):
        t = SimilarityTransform(2.5, 1.1, (3.0, -7.0))
        back = t.inverse().apply(t.apply(SQUARE.points))
        assert np.max(np.abs(back - SQUARE.points)) < 1e-10


class TestAlignShapes:
    def test_identical_shapes_align_identically(self):
        aligned, _ = align_shapes([SQUARE, SQUARE])
        assert np.allclose(aligned[0].points, aligned[1].points, atol=1e-12)
        mean = np.mean([a.points for a in aligned], axis=0)
        assert np.allclose(mean, aligned[0].points, atol=1e-12)

    def test_similar_copies_coincide(self):
        copy = rotated_about_centroid(SQUARE, 40.0, scale=1.7, shift=(3.0, -2.0))
        aligned, transforms = align_shapes([SQUARE, copy])
        assert np.max(np.abs(aligned[0].points - aligned[1].points)) < 1e-8
        for original, t in zip([SQUARE, copy], transforms):
            assert np.allclose(t.apply(original.points),
                               aligned[0].points, atol=1e-8)

    def test_alignment_reduces_residual_spread(self):
        rng = np.random.default_rng(5)
        base = Shape(rng.normal(0.0, 1.0, (12, 2)))
        shapes = []
        for _ in range(50):
            jitter = Shape(base.points + rng.normal(0.0, 0.01, (12, 2)))
            shapes.append(rotated_about_centroid(
                jitter, rng.uniform(-30, 30), scale=rng.uniform(0.8, 1.25),
                shift=rng.uniform(-0.5, 0.5, 2)))

        def residual(collection):
            stack = np.stack([s.points for s in collection])
            return float(np.sum((stack - stack.mean(axis=0)) ** 2))

        aligned, _ = align_shapes(shapes)
        # raw shapes have spread ~1, matching the unit-RMS aligned frame
        assert residual(aligned) < residual(shapes)

    def test_rejects_single_shape(self):
        with pytest.raises(InsufficientData):
            align_shapes([SQUARE])

    def test_rejects_degenerate_member(self):
        flat = Shape([[2.0, 2.0]] * 4)
        with pytest.raises(DegenerateShape):
            align_shapes([SQUARE, flat])


class TestBuildShapeModel:
    def test_zero_variance_unsatisfiable(self):
        with pytest.raises(RetentionUnsatisfiable):
            build_shape_model([SQUARE] * 5, retention=1)
        with pytest.raises(RetentionUnsatisfiable):
            build_shape_model([SQUARE] * 5, retention=0.5)

    def test_single_mode_data_recovers_direction(self):
        rng = np.random.default_rng(3)
        base = rng.normal(0.0, 1.0, 16)
        direction = rng.normal(0.0, 1.0, 16)
        direction /= np.linalg.norm(direction)
        shapes = [Shape.from_flat(base + c * direction)
                  for c in rng.normal(0.0, 2.0, 40)]
        for retention in (0.3, 0.9, 1.0):
            model = build_shape_model(shapes, retention=retention)
            assert model.t == 1
            assert abs(abs(model.components[0] @ direction) - 1.0) < 1e-9

    def test_full_retention_round_trip(self):
        rng = np.random.default_rng(7)
        shapes = random_shapes(rng, 200, 20)
        model = build_shape_model(shapes, retention=1.0)
        assert model.t == 40
        for s in shapes[:20]:
            recon = reconstruct(model, project(model, s))
            scale = 1.0 + np.max(np.abs(s.points))
            assert np.max(np.abs(recon.points - s.points)) < 1e-8 * scale

    def test_explicit_count_beyond_rank_rejected(self):
        rng = np.random.default_rng(1)
        shapes = random_shapes(rng, 5, 10)  # rank at most K - 1 = 4
        with pytest.raises(RetentionUnsatisfiable):
            build_shape_model(shapes, retention=5)
        model = build_shape_model(shapes, retention=4)
        assert model.t == 4

    def test_components_orthonormal_and_sorted(self):
        rng = np.random.default_rng(9)
        model = build_shape_model(random_shapes(rng, 60, 8), retention=1.0)
        gram = model.components @ model.components.T
        assert np.max(np.abs(gram - np.eye(model.t))) < 1e-9
        assert np.all(np.diff(model.eigenvalues) <= 0)
        assert np.all(model.eigenvalues > 0)

    def test_sign_convention_first_nonzero_positive(self):
        rng = np.random.default_rng(13)
        model = build_shape_model(random_shapes(rng, 30, 6), retention=1.0)
        for row in model.components:
            nonzero = row[np.nonzero(row)[0]]
            assert nonzero[0] > 0

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            build_shape_model([SQUARE], retention=1)

    def test_aligned_mode_removes_similarity_variation(self):
        rng = np.random.default_rng(21)
        base = Shape(rng.normal(0.0, 1.0, (10, 2)))
        shapes = [rotated_about_centroid(base, rng.uniform(-40, 40),
                                         scale=rng.uniform(0.5, 2.0),
                                         shift=rng.uniform(-3, 3, 2))
                  for _ in range(30)]
        model = build_shape_model(shapes, retention=0.99, mode="aligned")
        # similarity-only variation collapses after alignment
        assert float(model.eigenvalues.sum()) < 1e-10


class TestProjectClampReconstruct:
    @pytest.fixture()
    def model(self):
        rng = np.random.default_rng(17)
        return build_shape_model(random_shapes(rng, 80, 6), retention=1.0)

    def test_project_mean_is_zero(self, model):
        b = project(model, Shape.from_flat(model.mean))
        assert np.max(np.abs(b)) < 1e-12

    def test_project_single_component_offset(self, model):
        shape = Shape.from_flat(model.mean + 2.0 * model.components[0])
        b = project(model, shape)
        expected = np.zeros(model.t)
        expected[0] = 2.0
        assert np.max(np.abs(b - expected)) < 1e-9

    def test_project_rejects_wrong_point_count(self, model):
        with pytest.raises(ShapeMismatch):
            project(model, SQUARE)

    def test_clamp_interior_is_bitwise_identity(self, model):
        b = np.zeros(model.t)
        assert np.array_equal(clamp_params(model, b), b)
        interior = 2.9 * np.sqrt(model.eigenvalues)
        assert np.array_equal(clamp_params(model, interior), interior)

    def test_clamp_hits_bounds(self, model):
        bound = 3.0 * np.sqrt(model.eigenvalues)
        assert np.array_equal(clamp_params(model, 5.0 * np.sqrt(model.eigenvalues)),
                              bound)
        assert np.array_equal(clamp_params(model, -10.0 * np.sqrt(model.eigenvalues)),
                              -bound)

    def test_clamp_wrong_length(self, model):
        with pytest.raises(ParamMismatch):
            clamp_params(model, np.zeros(model.t + 1))

    def test_reconstruct_zero_is_mean_exactly(self, model):
        recon = reconstruct(model, np.zeros(model.t))
        assert np.array_equal(recon.flat, model.mean)

    def test_reconstruct_linear_combination(self, model):
        b = np.zeros(model.t)
        b[0] = 3.0 * math.sqrt(model.eigenvalues[0])
        recon = reconstruct(model, b)
        expected = model.mean + b[0] * model.components[0]
        assert np.max(np.abs(recon.flat - expected)) < 1e-12

    def test_reconstruct_wrong_length(self, model):
        with pytest.raises(ParamMismatch):
            reconstruct(model, np.zeros(model.t + 2))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_clamp_bound_always_holds(self, seed):
        rng = np.random.default_rng(seed)
        model = build_shape_model(random_shapes(np.random.default_rng(17), 80, 6),
                                  retention=1.0)
        scale = np.sqrt(model.eigenvalues)
        b = rng.uniform(-10, 10, model.t) * scale
        clamped = clamp_params(model, b)
        assert np.all(np.abs(clamped) <= 3.0 * scale)
        inside = np.abs(b) <= 3.0 * scale
        assert np.array_equal(clamped[inside], b[inside])


class TestAsmTransform:
    def test_mean_is_fixed_point(self):
        rng = np.random.default_rng(23)
        model = build_shape_model(random_shapes(rng, 50, 8), retention=0.9)
        out = asm_transform(model, Shape.from_flat(model.mean))
        assert np.array_equal(out.flat, model.mean)

    def test_full_rank_in_distribution_identity(self):
        rng = np.random.default_rng(29)
        shapes = random_shapes(rng, 100, 5)
        model = build_shape_model(shapes, retention=1.0)
        for s in shapes[:20]:
            if np.all(np.abs(project(model, s)) < 3.0 * np.sqrt(model.eigenvalues)):
                out = asm_transform(model, s)
                assert np.max(np.abs(out.points - s.points)) < 1e-8

    def test_output_in_model_subspace(self):
        rng = np.random.default_rng(31)
        shapes = random_shapes(rng, 60, 6)
        model = build_shape_model(shapes, retention=1)
        out = asm_transform(model, shapes[0])
        residual = (out.flat - model.mean) - model.components.T @ project(model, out)
        assert np.max(np.abs(residual)) < 1e-10

    def test_variance_reduction_at_90_percent(self):
        from asmkit.data import SyntheticConfig, generate_synthetic

        dataset = generate_synthetic(SyntheticConfig(train_count=500, test_count=1,
                                                     seed=2))
        shapes = [r.gt_shape for r in dataset.split("train")]
        model = build_shape_model(shapes, retention=0.9)
        inputs = np.stack([s.flat for s in shapes])
        outputs = np.stack([asm_transform(model, s).flat for s in shapes])
        assert outputs.var(axis=0, ddof=1).sum() <= inputs.var(axis=0, ddof=1).sum()

    def test_aligned_mode_preserves_frame(self):
        rng = np.random.default_rng(37)
        base = Shape(rng.normal(0.0, 1.0, (10, 2)))
        shapes = [Shape(base.points + rng.normal(0.0, 0.05, (10, 2)))
                  for _ in range(40)]
        model = build_shape_model(shapes, retention=1.0, mode="aligned")
        checked = 0
        for s in shapes[:10]:
            frame = similarity_fit(s, model.mean_shape())
            b = project(model, frame.apply_shape(s))
            if np.any(np.abs(b) > 3.0 * np.sqrt(model.eigenvalues)):
                continue  # clamping active: not in-distribution
            out = asm_transform(model, s)
            in_rms = math.sqrt(float(np.mean(np.sum(
                (s.points - s.centroid()) ** 2, axis=1))))
            out_rms = math.sqrt(float(np.mean(np.sum(
                (out.points - out.centroid()) ** 2, axis=1))))
            assert np.max(np.abs(out.centroid() - s.centroid())) < 1e-6 * in_rms
            assert abs(out_rms - in_rms) < 1e-6 * in_rms
            checked += 1
        assert checked > 0

    def test_truncation_monotonicity(self):
        rng = np.random.default_rng(41)
        shapes = random_shapes(rng, 50, 6)
        full = build_shape_model(shapes, retention=1.0)
        errors = []
        for t in range(1, full.t + 1):
            model = build_shape_model(shapes, retention=t)
            errors.append(reconstruction_rms(model, shapes))
        assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
        assert errors[-1] <= 1e-8


class TestModelSerialization:
    def minimal_model(self):
        mean = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
        component = np.array([[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]])
        return ShapeModel(mean=mean, components=component,
                          eigenvalues=np.array([0.25]), mode="raw", n_points=3)

    def test_canonical_round_trip_is_byte_identical(self):
        text = serialize_model(self.minimal_model())
        assert serialize_model(deserialize_model(text)) == text

    def test_values_round_trip_exactly(self):
        rng = np.random.default_rng(43)
        model = build_shape_model(random_shapes(rng, 30, 4), retention=1.0)
        back = deserialize_model(serialize_model(model))
        assert np.array_equal(back.mean, model.mean)
        assert np.array_equal(back.components, model.components)
        assert np.array_equal(back.eigenvalues, model.eigenvalues)
        assert back.mode == model.mode and back.n_points == model.n_points

    def test_comments_and_blank_lines_ignored(self):
        text = serialize_model(self.minimal_model(), comments=["built by a test"])
        lines = text.splitlines()
        lines.insert(3, "")
        lines.insert(2, "# another comment")
        model = deserialize_model("\n".join(lines) + "\n")
        assert model.n_points == 3

    def test_missing_eigenvector_line_reports_position(self):
        text = serialize_model(self.minimal_model())
        truncated = text.replace("ev 1", "xv 1")
        with pytest.raises(FormatError, match="ev"):
            deserialize_model(truncated)
        header_claims_two = text.replace("n_components 1", "n_components 2")
        with pytest.raises(FormatError) as excinfo:
            deserialize_model(header_claims_two)
        assert "eigenvalues" in str(excinfo.value)

    def test_missing_component_row(self):
        model = self.minimal_model()
        text = serialize_model(model)
        # drop the final (only) eigenvector line entirely
        body = "\n".join(text.splitlines()[:-1]) + "\n"
        with pytest.raises(FormatError) as excinfo:
            deserialize_model(body)
        assert excinfo.value.line is not None

    def test_non_finite_eigenvalue_rejected(self):
        text = serialize_model(self.minimal_model())
        bad = text.replace("eigenvalues 2.5000000000000000e-01",
                           "eigenvalues NaN")
        with pytest.raises(FormatError, match="non-finite"):
            deserialize_model(bad)

    def test_bad_header_rejected(self):
        with pytest.raises(FormatError):
            deserialize_model("ASMMODEL v2\nmode raw\n")
