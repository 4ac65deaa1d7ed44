import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import randn, t
from snflows.errors import ConvergenceError, DimensionError, SpectralNormError
from snflows.linalg import (
    DTYPE,
    HouseholderChain,
    OrthonormalColumns,
    back_substitute,
    bjorck_orthogonalize,
    dense_det,
    householder_apply,
    householder_materialize,
    ortho_residual,
    spectral_norm,
    sylvester_identity_check,
)


def cofactor_det(m):
    """Laplace expansion along the first row; exponential but independent of elimination."""
    m = [list(row) for row in m]
    if len(m) == 1:
        return m[0][0]
    return sum((-1) ** j * m[0][j] * cofactor_det([row[:j] + row[j + 1:] for row in m[1:]])
               for j in range(len(m)))


def reflection(v):
    v = np.asarray(v, dtype=float)
    return np.eye(len(v)) - 2.0 * np.outer(v, v) / (v @ v)


class TestDenseDet:
    def test_identity(self):
        assert dense_det(torch.eye(3, dtype=DTYPE)) == 1.0

    def test_diagonal(self):
        assert dense_det(torch.diag(t([2.0, 3.0]))) == pytest.approx(6.0, rel=1e-15)

    def test_matches_cofactor_expansion(self, gen):
        m = randn(gen, 4, 4)
        assert dense_det(m) == pytest.approx(cofactor_det(m.tolist()), rel=1e-12)

    def test_needs_pivoting(self):
        m = t([[0.0, 1.0], [1.0, 0.0]])
        assert dense_det(m) == -1.0

    def test_singular(self):
        assert dense_det(t([[1.0, 2.0], [2.0, 4.0]])) == 0.0

    def test_triangular_is_diagonal_product(self, gen):
        for d in range(1, 9):
            r = torch.triu(randn(gen, d, d))
            assert dense_det(r) == pytest.approx(float(torch.diagonal(r).prod()), rel=1e-12)

    def test_rejects_non_square(self):
        with pytest.raises(DimensionError):
            dense_det(torch.zeros(2, 3, dtype=DTYPE))

    def test_rejects_too_large(self):
        with pytest.raises(DimensionError):
            dense_det(torch.eye(65, dtype=DTYPE))


class TestSylvesterIdentity:
    def test_zero_a(self, gen):
        lhs, rhs = sylvester_identity_check(torch.zeros(4, 2, dtype=DTYPE), randn(gen, 2, 4))
        assert lhs == rhs == 1.0

    def test_rank_one_is_determinant_lemma(self, gen):
        u, w = randn(gen, 5), randn(gen, 5)
        lhs, rhs = sylvester_identity_check(u.unsqueeze(1), w.unsqueeze(0))
        assert rhs == pytest.approx(1.0 + float(w @ u), rel=1e-14)
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_seeded_pair(self, gen):
        lhs, rhs = sylvester_identity_check(randn(gen, 5, 2), randn(gen, 2, 5))
        assert abs(lhs - rhs) < 1e-10

    def test_shape_mismatch(self, gen):
        with pytest.raises(DimensionError):
            sylvester_identity_check(randn(gen, 4, 2), randn(gen, 3, 4))

    @settings(max_examples=60, deadline=None)
    @given(d=st.integers(1, 8), data=st.data())
    def test_identity_holds(self, d, data):
        m = data.draw(st.integers(1, d))
        g = torch.Generator().manual_seed(data.draw(st.integers(0, 2 ** 31)))
        lhs, rhs = sylvester_identity_check(randn(g, d, m), randn(g, m, d))
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


class TestBjorck:
    def test_orthonormal_is_fixed_point(self, gen):
        q, _ = torch.linalg.qr(randn(gen, 6, 3))
        out = bjorck_orthogonalize(q)
        assert out.steps <= 1
        assert torch.allclose(out.matrix, q, atol=1e-12)

    def test_half_identity_first_step(self):
        out = bjorck_orthogonalize(0.5 * torch.eye(2, dtype=DTYPE), fixed_steps=1, eps=1.0)
        assert torch.allclose(out.matrix, 0.6875 * torch.eye(2, dtype=DTYPE), atol=1e-15)

    def test_half_identity_converges(self):
        out = bjorck_orthogonalize(0.5 * torch.eye(2, dtype=DTYPE))
        assert torch.allclose(out.matrix, torch.eye(2, dtype=DTYPE), atol=1e-6)

    def test_spectral_gap_0_9_converges(self, gen):
        q, _ = torch.linalg.qr(randn(gen, 8, 4))
        # singular values sqrt(1 - 0.9) .. 1 give ||Q^T Q - I||_2 = 0.9 exactly
        scales = torch.sqrt(torch.linspace(0.1, 1.0, 4, dtype=DTYPE))
        q0 = q * scales
        gap = q0.T @ q0 - torch.eye(4, dtype=DTYPE)
        assert float(spectral_norm(gap)) == pytest.approx(0.9, abs=1e-9)
        out = bjorck_orthogonalize(q0)
        assert out.steps <= 30
        assert float(ortho_residual(out.matrix)) <= 1e-6

    def test_residual_non_increasing(self, gen):
        q0 = torch.eye(6, 3, dtype=DTYPE) + 0.15 * randn(gen, 6, 3)
        hist = bjorck_orthogonalize(q0, eps=1e-14).residuals
        assert bool(torch.all(hist[1:] <= hist[:-1] + 1e-14))

    def test_precondition_violation(self):
        with pytest.raises(SpectralNormError) as exc:
            bjorck_orthogonalize(2.0 * torch.eye(3, dtype=DTYPE))
        assert exc.value.norm == pytest.approx(3.0, rel=1e-8)

    def test_non_convergence_carries_residual(self):
        with pytest.raises(ConvergenceError) as exc:
            bjorck_orthogonalize(0.1 * torch.eye(2, dtype=DTYPE), max_steps=2)
        assert exc.value.residual > 1e-6

    def test_batched_matches_single(self, gen):
        q0 = torch.eye(5, 2, dtype=DTYPE) + 0.1 * randn(gen, 3, 5, 2)
        batch = bjorck_orthogonalize(q0, eps=1e-12)
        for i in range(3):
            single = bjorck_orthogonalize(q0[i], eps=1e-12, fixed_steps=batch.steps)
            assert torch.allclose(batch.matrix[i], single.matrix, atol=1e-15)

    def test_orthonormal_columns_rejects_non_orthonormal(self):
        with pytest.raises(ConvergenceError):
            OrthonormalColumns(2.0 * torch.eye(2, dtype=DTYPE))

    def test_rejects_wide(self):
        with pytest.raises(DimensionError):
            bjorck_orthogonalize(torch.zeros(2, 3, dtype=DTYPE))


class TestHouseholder:
    def test_parallel_vector_flips(self):
        e1, e2 = t([1.0, 0.0, 0.0]), t([0.0, 1.0, 0.0])
        chain = HouseholderChain(e1.unsqueeze(0))
        assert torch.equal(householder_apply(chain, e1), -e1)
        assert torch.equal(householder_apply(chain, e2), e2)

    def test_norm_preserved(self, gen):
        chain = HouseholderChain(randn(gen, 3, 4))
        z = randn(gen, 4)
        assert abs(float(torch.linalg.norm(chain.apply(z)) - torch.linalg.norm(z))) < 1e-12

    def test_empty_chain_is_identity(self):
        p = householder_materialize(HouseholderChain(torch.zeros(0, 4, dtype=DTYPE)))
        assert torch.equal(p.matrix, torch.eye(4, dtype=DTYPE))

    def test_single_reflection(self):
        p = householder_materialize(HouseholderChain(torch.eye(3, dtype=DTYPE)[:1]))
        assert torch.allclose(p.matrix, torch.diag(t([-1.0, 1.0, 1.0])), atol=0)

    def test_two_vector_product(self, gen):
        v = randn(gen, 2, 5)
        p = householder_materialize(HouseholderChain(v)).matrix.numpy()
        h1, h2 = reflection(v[0].numpy()), reflection(v[1].numpy())
        assert np.allclose(p, h2 @ h1, atol=1e-13)
        z = randn(gen, 5).numpy()
        assert np.allclose(h2 @ (h1 @ z), (h2 @ h1) @ z, atol=1e-13)

    def test_materialized_is_orthogonal(self, gen):
        p = householder_materialize(HouseholderChain(randn(gen, 7, 6))).matrix
        assert float(ortho_residual(p)) <= 1e-10

    def test_transpose_inverts(self, gen):
        chain = HouseholderChain(randn(gen, 4, 6))
        z = randn(gen, 6)
        assert torch.allclose(chain.apply(chain.apply(z), transpose=True), z, atol=1e-13)

    def test_rejects_zero_vector(self):
        with pytest.raises(DimensionError):
            HouseholderChain(torch.zeros(1, 3, dtype=DTYPE))

    def test_dimension_mismatch(self, gen):
        with pytest.raises(DimensionError):
            HouseholderChain(randn(gen, 1, 3)).apply(randn(gen, 4))


def test_back_substitute(gen):
    r = torch.triu(randn(gen, 5, 5)) + 3 * torch.eye(5, dtype=DTYPE)
    y = randn(gen, 5)
    assert torch.allclose(r @ back_substitute(r, y), y, atol=1e-13)


def test_spectral_norm_matches_svd(gen):
    x = randn(gen, 6, 4)
    assert float(spectral_norm(x)) == pytest.approx(float(torch.linalg.matrix_norm(x, 2)), rel=1e-8)
