import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from poissongnn.baseline import solve
from poissongnn.fem import (FieldSpec, LinearSystem, assemble, evaluate_polynomial, l2_error, local_load,
                            local_stiffness, monomial_exponents, n_monomials, residual_l2, residual_norm,
                            stiffness_matrix)
from poissongnn.geometry import NodeKind, assign_boundary_kinds, sample_domain, triangulate

from conftest import random_spec, square_mesh


def _stiffness_oracle(p):
    """Gradients of the barycentric basis from inverting [1 x y]; K = area * G G^T."""
    M = np.column_stack([np.ones(3), p])
    grads = np.linalg.inv(M)[1:].T  # row i = grad(phi_i)
    area = 0.5 * abs(np.linalg.det(M))
    return area * grads @ grads.T


triangles = arrays(np.float64, (3, 2), elements=st.floats(-3, 3)).filter(
    lambda p: abs(np.linalg.det(np.column_stack([np.ones(3), p]))) > 1e-3)


# ---------------------------------------------------------------------------
# local_stiffness / local_load


def test_reference_triangle_stiffness():
    K = local_stiffness([[0, 0], [1, 0], [0, 1]])
    np.testing.assert_allclose(K, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(triangles)
def test_stiffness_matches_oracle_and_kernel(p):
    K = local_stiffness(p)
    np.testing.assert_allclose(K, _stiffness_oracle(p), rtol=1e-9, atol=1e-9 * np.abs(K).max())
    np.testing.assert_allclose(K, K.T, atol=1e-12 * np.abs(K).max())
    np.testing.assert_allclose(K.sum(axis=1), 0, atol=1e-12 * max(1.0, np.abs(K).max()))


@settings(max_examples=50, deadline=None)
@given(triangles, st.floats(0.01, 100))
def test_stiffness_scale_invariant(p, s):
    K = local_stiffness(p)
    np.testing.assert_allclose(local_stiffness(s * p), K, rtol=1e-8, atol=1e-10 * np.abs(K).max())


def test_stiffness_orientation_independent():
    p = np.array([[0.1, 0.2], [0.9, 0.3], [0.4, 0.8]])
    K = local_stiffness(p)
    Kr = local_stiffness(p[[0, 2, 1]])
    np.testing.assert_allclose(Kr, K[np.ix_([0, 2, 1], [0, 2, 1])])


def test_degenerate_triangle_rejected():
    with pytest.raises(ValueError):
        local_stiffness([[0, 0], [1, 1], [2, 2]])
    with pytest.raises(ValueError):
        local_load([[0, 0], [1, 0], [2, 0]], [1, 1, 1])


def test_local_load_examples():
    ref = [[0, 0], [1, 0], [0, 1]]
    np.testing.assert_array_equal(local_load(ref, [0, 0, 0]), 0)
    np.testing.assert_allclose(local_load(ref, [1, 1, 1]), [1 / 6] * 3)
    p = np.array([[0.2, 0.1], [1.7, 0.4], [0.3, 2.0]])
    area = 0.5 * abs(np.linalg.det(np.column_stack([np.ones(3), p])))
    np.testing.assert_allclose(local_load(p, [-2.5] * 3), [-2.5 * area / 3] * 3)


# ---------------------------------------------------------------------------
# polynomials


def test_polynomial_examples():
    assert evaluate_polynomial([1.0], [0.3, -7.0]) == 1.0
    # 1 + ... layout is (1, x, y): "x + 2y"
    assert evaluate_polynomial([0.0, 1.0, 2.0], [1.0, 1.0]) == 3.0


def test_polynomial_matches_monomial_sum():
    rng = np.random.default_rng(0)
    c = rng.uniform(-1, 1, 6)
    pts = rng.uniform(-2, 2, (10, 2))
    # c0 + c1 x + c2 y + c3 x^2 + c4 xy + c5 y^2
    x, y = pts[:, 0], pts[:, 1]
    oracle = c[0] + c[1] * x + c[2] * y + c[3] * x * x + c[4] * x * y + c[5] * y * y
    np.testing.assert_allclose(evaluate_polynomial(c, pts), oracle, rtol=1e-14, atol=1e-14)


def test_monomial_layout():
    assert monomial_exponents(2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
    assert [n_monomials(d) for d in range(4)] == [1, 3, 6, 10]
    with pytest.raises(ValueError):
        evaluate_polynomial([1.0, 2.0], [0.0, 0.0])


def test_field_spec_validates_length():
    with pytest.raises(ValueError):
        FieldSpec([1.0, 2.0], [1.0, 2.0, 3.0], 1)
    with pytest.raises(ValueError):
        FieldSpec([1.0], [1.0], -1)


# ---------------------------------------------------------------------------
# assembly


def _mixed_mesh(seed=0, h=0.1):
    return assign_boundary_kinds(triangulate(sample_domain(seed), h), "random_arc", seed)


def test_linear_field_reproduced_exactly():
    mesh = square_mesh(0.1)
    system = assemble(mesh, FieldSpec([0, 0, 0], [0, 1, 0], 1))
    U = solve(system)
    assert np.max(np.abs(U - mesh.coords[:, 0])) < 1e-10


def test_quadratic_convergence_order():
    exact = lambda p: p[:, 0] ** 2 + p[:, 1] ** 2  # noqa: E731
    spec = FieldSpec([-4, 0, 0, 0, 0, 0], [0, 0, 0, 1, 0, 1], 2)
    hs, errs = [0.2, 0.1, 0.05], []
    for h in hs:
        mesh = square_mesh(h)
        errs.append(l2_error(mesh, solve(assemble(mesh, spec)), exact))
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 1.7 <= slope <= 2.3


@pytest.mark.parametrize("seed", range(4))
def test_assembled_system_invariants(seed):
    mesh = _mixed_mesh(seed)
    spec = random_spec(np.random.default_rng(seed))
    sys_ = assemble(mesh, spec)
    A = sys_.A
    assert sp.isspmatrix_csr(A) or isinstance(A, sp.csr_array)
    dn = np.flatnonzero(mesh.node_kind == NodeKind.DIRICHLET)
    np.testing.assert_array_equal(np.sort(sys_.dirichlet_nodes), dn)
    dense = A.toarray()
    for i in dn:
        row = np.zeros(mesh.n_nodes)
        row[i] = 1.0
        assert np.array_equal(dense[i], row)
    np.testing.assert_array_equal(sys_.B[dn], spec.g(mesh.coords[dn]))

    free = np.flatnonzero(mesh.node_kind != NodeKind.DIRICHLET)
    sub = dense[np.ix_(free, free)]
    np.testing.assert_allclose(sub, sub.T, atol=1e-12)

    # off-diagonal pattern of free rows = mesh neighbors
    edges = {tuple(e) for e in mesh.edges().tolist()}
    coo = A.tocoo()
    for i, j, v in zip(coo.row, coo.col, coo.data):
        if i != j and v != 0:
            assert (min(i, j), max(i, j)) in edges


def test_all_neumann_kernel():
    A = stiffness_matrix(_mixed_mesh(2))
    np.testing.assert_allclose(A @ np.ones(A.shape[0]), 0, atol=1e-10)


def test_load_is_lumped_area_over_three():
    mesh = _mixed_mesh(1)
    sys_ = assemble(mesh, FieldSpec([1.0], [0.0], 0))
    t = mesh.triangles
    P = mesh.coords[t]
    area = 0.5 * np.abs((P[:, 1, 0] - P[:, 0, 0]) * (P[:, 2, 1] - P[:, 0, 1])
                        - (P[:, 1, 1] - P[:, 0, 1]) * (P[:, 2, 0] - P[:, 0, 0]))
    oracle = np.zeros(mesh.n_nodes)
    for tri, a in zip(t, area):
        oracle[tri] += a / 3
    free = mesh.node_kind != NodeKind.DIRICHLET
    np.testing.assert_allclose(sys_.B[free], oracle[free], rtol=1e-13)


# ---------------------------------------------------------------------------
# residual


def test_residual_examples():
    n = 4
    eye = LinearSystem(sp.identity(n, format="csr"), np.zeros(n), np.zeros(0, int), np.zeros(0))
    e1 = np.eye(n)[0]
    assert residual_norm(eye, e1) == 1.0
    assert residual_l2(eye, 3 * e1) == 3.0
    with pytest.raises(ValueError):
        residual_norm(eye, np.zeros(n + 1))


def test_residual_matches_dense_oracle():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(5, 5))
    B = rng.normal(size=5)
    U = rng.normal(size=5)
    sys_ = LinearSystem(sp.csr_matrix(A), B, np.zeros(0, int), np.zeros(0))
    oracle = sum((-B[i] + sum(A[i, j] * U[j] for j in range(5))) ** 2 for i in range(5))
    assert residual_norm(sys_, U) == pytest.approx(oracle, rel=1e-13)


def test_residual_zero_iff_solution():
    mesh = _mixed_mesh(3, 0.15)
    sys_ = assemble(mesh, random_spec(np.random.default_rng(3)))
    U = solve(sys_)
    assert residual_norm(sys_, U) <= 1e-20
    U[0] += 1e-3
    assert residual_norm(sys_, U) > 0
