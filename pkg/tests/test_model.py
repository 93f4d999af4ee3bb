import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facegaze.errors import DegenerateGeometryError, InvalidArgumentError, ParseError, ValidationError
from facegaze.model import (
    MorphableModel,
    interpolated_rows,
    load_model,
    model_to_dict,
    project_to_subspace,
    sample_mesh,
    sample_surface,
    save_model,
    synthesize,
)

coeff_arrays = arrays(np.float64, 4, elements=st.floats(-0.05, 0.05, allow_nan=False))


def _tiny_model(basis=None):
    mean = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=float).ravel()
    if basis is None:
        basis = np.zeros((12, 1))
        basis[2, 0] = 1.0
    ann = {"left_eye": [0], "right_eye": [1], "landmarks": [0, 1, 2]}
    return MorphableModel(mean, basis, [1.0], [[0, 1, 2], [1, 3, 2]], ann)


class TestSynthesize:
    def test_zero_coefficients_give_mean(self, small_model):
        shape = synthesize(small_model, np.zeros(small_model.k))
        np.testing.assert_array_equal(shape.vertices.ravel(), small_model.mean_shape)

    def test_single_axis(self, small_model):
        c = np.zeros(small_model.k)
        c[0] = 0.02
        shape = synthesize(small_model, c)
        expected = small_model.mean_shape + 0.02 * small_model.basis[:, 0]
        np.testing.assert_allclose(shape.vertices.ravel(), expected, rtol=0, atol=1e-15)

    @given(coeff_arrays)
    @settings(max_examples=30, deadline=None)
    def test_projection_round_trip(self, small_model, c):
        np.testing.assert_allclose(project_to_subspace(small_model, synthesize(small_model, c)), c,
                                   rtol=0, atol=1e-9)

    def test_wrong_length_rejected(self, small_model):
        with pytest.raises(InvalidArgumentError):
            synthesize(small_model, np.zeros(small_model.k + 1))


class TestProjectToSubspace:
    def test_mean_projects_to_zero(self, small_model):
        np.testing.assert_allclose(project_to_subspace(small_model, small_model.mean_vertices),
                                   np.zeros(small_model.k), atol=1e-12)

    def test_out_of_subspace_component_ignored(self, small_model, rng):
        theta = rng.normal(size=small_model.k) * 0.01
        B = small_model.basis
        # Gram-Schmidt a random direction against every basis column
        p = rng.normal(size=B.shape[0])
        for j in range(B.shape[1]):
            p -= (B[:, j] @ p) * B[:, j]
        p *= 0.01 / np.linalg.norm(p)
        assert np.max(np.abs(B.T @ p)) < 1e-12
        shape = synthesize(small_model, theta).vertices.ravel() + p
        np.testing.assert_allclose(project_to_subspace(small_model, shape), theta, rtol=0, atol=1e-9)


class TestSampling:
    def test_single_triangle_containment(self):
        V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
        s = sample_mesh(V, np.array([[0, 1, 2]]), 1000, seed=4)
        # barycentric coordinates recovered by solving against the triangle's edges
        A = np.column_stack([V[1] - V[0], V[2] - V[0]])[:2]
        lam = np.linalg.solve(A, (s.points[:, :2] - V[0, :2]).T).T
        bary = np.column_stack([1 - lam.sum(1), lam])
        assert np.all(bary >= -1e-12) and np.all(bary <= 1 + 1e-12)
        np.testing.assert_allclose(bary.sum(1), 1.0, atol=1e-12)
        np.testing.assert_allclose(s.points[:, 2], 0.0)

    def test_area_proportional_hits(self):
        # triangle 0 has three times the area of triangle 1
        V = np.array([[0.0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]])
        s = sample_mesh(V, np.array([[0, 1, 2], [3, 4, 5]]), 10000, seed=9)
        hits = np.sum(s.points[:, 0] < 5)
        sigma = np.sqrt(10000 * 0.75 * 0.25)
        assert abs(hits - 7500) <= 3 * sigma

    def test_seed_determinism(self, small_model):
        a = sample_surface(small_model, np.zeros(small_model.k), 300, seed=7)
        b = sample_surface(small_model, np.zeros(small_model.k), 300, seed=7)
        assert a.points.tobytes() == b.points.tobytes()

    def test_zero_area_mesh(self):
        V = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        with pytest.raises(DegenerateGeometryError):
            sample_mesh(V, np.array([[0, 1, 2]]), 10, seed=0)

    def test_interpolated_rows_reproduce_samples(self, small_model, rng):
        c = rng.normal(size=small_model.k) * 0.01
        s = sample_surface(small_model, c, 200, seed=1)
        mean_rows, basis_rows = interpolated_rows(small_model, s)
        np.testing.assert_allclose(mean_rows + basis_rows @ c, s.points, atol=1e-14)


class TestPersistence:
    def test_round_trip(self, small_model, tmp_path):
        save_model(small_model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.mean_shape, small_model.mean_shape)
        np.testing.assert_array_equal(back.basis, small_model.basis)
        np.testing.assert_array_equal(back.basis_scales, small_model.basis_scales)
        np.testing.assert_array_equal(back.triangles, small_model.triangles)
        assert back.annotations.keys() == small_model.annotations.keys()
        for k in back.annotations:
            np.testing.assert_array_equal(back.annotations[k], small_model.annotations[k])

    def test_non_orthonormal_basis_rejected(self, small_model, tmp_path):
        doc = model_to_dict(small_model)
        doc["basis"] = (np.asarray(doc["basis"]) * 1.1).tolist()
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(ValidationError, match="orthonormal"):
            load_model(tmp_path / "m.json")

    def test_truncated_file(self, small_model, tmp_path):
        save_model(small_model, tmp_path / "m.json")
        text = (tmp_path / "m.json").read_text()
        (tmp_path / "t.json").write_text(text[: len(text) // 2])
        with pytest.raises(ParseError):
            load_model(tmp_path / "t.json")

    def test_missing_field(self, small_model, tmp_path):
        doc = model_to_dict(small_model)
        del doc["triangles"]
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(ParseError, match="triangles"):
            load_model(tmp_path / "m.json")


class TestInvariants:
    def test_tiny_model_valid(self):
        assert _tiny_model().n == 4

    def test_missing_annotation(self):
        m = _tiny_model()
        ann = dict(m.annotations)
        del ann["landmarks"]
        with pytest.raises(ValidationError, match="landmarks"):
            MorphableModel(m.mean_shape, m.basis, m.basis_scales, m.triangles, ann)

    def test_triangle_index_out_of_range(self):
        m = _tiny_model()
        with pytest.raises(ValidationError, match="triangle"):
            MorphableModel(m.mean_shape, m.basis, m.basis_scales, [[0, 1, 4]], m.annotations)

    def test_nonpositive_scale(self):
        m = _tiny_model()
        with pytest.raises(ValidationError, match="basis_scales"):
            MorphableModel(m.mean_shape, m.basis, [0.0], m.triangles, m.annotations)

    def test_arrays_are_read_only(self, small_model):
        with pytest.raises(ValueError):
            small_model.mean_shape[0] = 1.0
