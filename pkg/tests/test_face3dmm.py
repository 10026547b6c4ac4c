"""Tests for the PCA face model and synthetic basis construction."""

import numpy as np
import pytest

from stylesync import face3dmm as fm
from stylesync.errors import DimensionError, GenerationError


@pytest.fixture(scope="module")
def basis():
    return fm.make_synthetic_basis(seed=0)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestAssembleMesh:
    def test_zero_coefficients_give_mean(self, basis):
        mesh = fm.assemble_mesh(basis, fm.FaceParams())
        np.testing.assert_array_equal(mesh, basis.mean_shape)

    def test_unit_alpha_adds_first_identity_column(self, basis):
        alpha = np.zeros(fm.IDENTITY_DIMS)
        alpha[0] = 1.0
        mesh = fm.assemble_mesh(basis, fm.FaceParams(alpha=alpha))
        np.testing.assert_allclose(mesh, basis.mean_shape + basis.basis_id[:, 0], atol=1e-12)

    def test_matches_column_loop(self, basis):
        alpha = rng(1).normal(size=fm.IDENTITY_DIMS)
        beta = rng(2).normal(size=fm.EXPRESSION_DIMS)
        expected = basis.mean_shape.copy()
        for j in range(fm.IDENTITY_DIMS):
            expected += basis.basis_id[:, j] * alpha[j]
        for j in range(fm.EXPRESSION_DIMS):
            expected += basis.basis_exp[:, j] * beta[j]
        mesh = fm.assemble_mesh(basis, fm.FaceParams(alpha=alpha, beta=beta))
        np.testing.assert_allclose(mesh, expected, atol=1e-12)

    def test_affine_in_expression(self, basis):
        alpha = rng(3).normal(size=fm.IDENTITY_DIMS)
        b1 = rng(4).normal(size=fm.EXPRESSION_DIMS)
        b2 = rng(5).normal(size=fm.EXPRESSION_DIMS)
        m_sum = fm.assemble_mesh(basis, fm.FaceParams(alpha=alpha, beta=b1 + b2))
        m_one = fm.assemble_mesh(basis, fm.FaceParams(alpha=alpha, beta=b1))
        np.testing.assert_allclose(m_sum - m_one, basis.basis_exp @ b2, atol=1e-9)

    def test_bad_param_lengths_rejected(self):
        with pytest.raises(DimensionError):
            fm.FaceParams(alpha=np.zeros(10))
        with pytest.raises(DimensionError):
            fm.FaceParams(beta=np.zeros(63))

    def test_batched_matches_single(self, basis):
        alphas = rng(6).normal(size=(4, fm.IDENTITY_DIMS))
        betas = rng(7).normal(size=(4, fm.EXPRESSION_DIMS))
        batched = fm.assemble_meshes(basis, alphas, betas)
        for i in range(4):
            single = fm.assemble_mesh(basis, fm.FaceParams(alpha=alphas[i], beta=betas[i]))
            np.testing.assert_allclose(batched[i], single, atol=1e-10)


class TestMouthEmbedding:
    def test_all_zero(self, basis):
        beta = fm.embed_mouth_params(np.zeros(13), np.zeros(51), basis)
        np.testing.assert_array_equal(beta, np.zeros(64))

    def test_ones_land_on_mouth_indices(self, basis):
        beta = fm.embed_mouth_params(np.ones(13), np.zeros(51), basis)
        assert beta.sum() == 13
        np.testing.assert_array_equal(beta[basis.mouth_dim_idx], np.ones(13))

    def test_round_trip(self, basis):
        m = rng(8).normal(size=13)
        rest = rng(9).normal(size=51)
        beta = fm.embed_mouth_params(m, rest, basis)
        np.testing.assert_array_equal(fm.extract_mouth_params(beta, basis), m)
        np.testing.assert_array_equal(beta[basis.rest_dim_idx], rest)


class TestLipVertices:
    def test_mean_face_lips(self, basis):
        lips = fm.lip_vertices(basis.mean_shape, basis)
        expected = basis.mean_shape.reshape(-1, 3)[basis.lip_vertex_idx]
        np.testing.assert_array_equal(lips, expected)

    def test_non_lip_perturbation_ignored(self, basis):
        mesh = basis.mean_shape.copy()
        non_lip = np.setdiff1d(np.arange(basis.num_vertices), basis.lip_vertex_idx)
        mesh.reshape(-1, 3)[non_lip] += 5.0
        np.testing.assert_array_equal(
            fm.lip_vertices(mesh, basis), fm.lip_vertices(basis.mean_shape, basis)
        )

    def test_matches_manual_gather(self, basis):
        mesh = rng(10).normal(size=basis.mean_shape.shape)
        lips = fm.lip_vertices(mesh, basis)
        manual = np.stack([mesh[3 * v: 3 * v + 3] for v in basis.lip_vertex_idx])
        np.testing.assert_array_equal(lips, manual)


class TestSyntheticBasis:
    def test_deterministic(self):
        b1 = fm.make_synthetic_basis(seed=7)
        b2 = fm.make_synthetic_basis(seed=7)
        assert np.array_equal(b1.basis_exp, b2.basis_exp)
        assert np.array_equal(b1.basis_id, b2.basis_id)
        assert np.array_equal(b1.mean_shape, b2.mean_shape)

    def test_expression_gram_matrix_is_identity(self, basis):
        gram = basis.basis_exp.T @ basis.basis_exp
        np.testing.assert_allclose(gram, np.eye(fm.EXPRESSION_DIMS), atol=1e-10)

    def test_identity_gram_matrix_is_identity(self, basis):
        gram = basis.basis_id.T @ basis.basis_id
        np.testing.assert_allclose(gram, np.eye(fm.IDENTITY_DIMS), atol=1e-10)

    def test_mouth_columns_mass_on_lips(self, basis):
        mass = fm.mouth_column_lip_mass(basis)
        assert np.all(mass >= 0.9)

    def test_mouth_dim_count(self, basis):
        assert basis.mouth_dim_idx.size == 13
        assert np.unique(basis.mouth_dim_idx).size == 13

    def test_lip_indices_valid(self, basis):
        assert basis.lip_vertex_idx.size > 0
        assert np.all(basis.lip_vertex_idx < basis.num_vertices)

    def test_non_mouth_dims_barely_move_lips(self, basis):
        g = rng(11)
        mouth_deltas, rest_deltas = [], []
        for _ in range(20):
            m = g.normal(size=13)
            m /= np.linalg.norm(m)
            beta_m = fm.embed_mouth_params(m, np.zeros(51), basis)
            rest = g.normal(size=51)
            rest /= np.linalg.norm(rest)
            beta_r = fm.embed_mouth_params(np.zeros(13), rest, basis)
            base = fm.lip_vertices(fm.assemble_mesh(basis, fm.FaceParams()), basis)
            lip_m = fm.lip_vertices(fm.assemble_mesh(basis, fm.FaceParams(beta=beta_m)), basis)
            lip_r = fm.lip_vertices(fm.assemble_mesh(basis, fm.FaceParams(beta=beta_r)), basis)
            mouth_deltas.append(np.abs(lip_m - base).sum())
            rest_deltas.append(np.abs(lip_r - base).sum())
        assert max(rest_deltas) < 0.1 * min(mouth_deltas)

    def test_infeasible_mass_constraint_rejected(self):
        with pytest.raises(GenerationError):
            fm.make_synthetic_basis(seed=0, num_vertices=32, lip_fraction=0.45)

    def test_too_few_vertices_rejected(self):
        with pytest.raises(GenerationError):
            fm.make_synthetic_basis(seed=0, num_vertices=16)

    def test_mean_shape_is_planar_desk_scale(self, basis):
        pts = basis.mean_shape.reshape(-1, 3)
        np.testing.assert_array_equal(pts[:, 2], 0.0)
        assert np.abs(pts[:, :2]).max() < 2.0
