import math

import numpy as np
import pytest
import scipy.sparse as sp

from poissongnn.baseline import SingularMatrixError, lu_factor, lu_solve, solve, timed_compare
from poissongnn.fem import FieldSpec, LinearSystem, assemble, residual_norm
from poissongnn.geometry import DomainShape, triangulate
from poissongnn.graph import build_graph
from poissongnn.model import ModelConfig, ModelParams
from poissongnn.training import DatasetSpec, sample_dataset

SMALL = ModelConfig(latent_dim=4, encoder_hidden=5, message_hidden=6, decoder_hidden=5)


@pytest.fixture(scope="module")
def assembled_300():
    return sample_dataset(DatasetSpec(num_samples=1, node_range=(300, 330), seed=21))[0]


def test_identity():
    f = lu_factor(np.eye(4))
    np.testing.assert_array_equal(f.L, np.eye(4))
    np.testing.assert_array_equal(f.U, np.eye(4))
    np.testing.assert_array_equal(f.perm, np.arange(4))
    b = np.array([1.0, -2.0, 3.0, 0.5])
    np.testing.assert_array_equal(lu_solve(f, b), b)


def test_forced_pivot():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    f = lu_factor(A)
    np.testing.assert_array_equal(f.perm, [1, 0])
    np.testing.assert_array_equal(f.P @ A, f.L @ f.U)


def test_diagonal_solve():
    f = lu_factor(np.array([[2.0, 0.0], [0.0, 4.0]]))
    np.testing.assert_array_equal(lu_solve(f, [2.0, 8.0]), [1.0, 2.0])


def test_singular_rejected():
    with pytest.raises(SingularMatrixError):
        lu_factor(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(ValueError):
        lu_factor(np.ones((2, 3)))


def test_assembled_reconstruction_and_residual(assembled_300):
    A = assembled_300.system.A
    f = lu_factor(assembled_300.system)
    dense = A.toarray()
    assert np.max(np.abs(f.P @ dense - f.L @ f.U)) < 1e-10
    U = lu_solve(f, assembled_300.system.B)
    B = assembled_300.system.B
    assert np.linalg.norm(A @ U - B) / np.linalg.norm(B) < 1e-10
    assert residual_norm(assembled_300.system, U) <= 1e-20


def test_random_probes_reconstruct():
    rng = np.random.default_rng(0)
    for n in (3, 10, 50):
        M = rng.normal(size=(n, n)) + n * np.eye(n) * rng.uniform(0, 1)
        f = lu_factor(M)
        assert np.max(np.abs(f.P @ M - f.L @ f.U)) <= 1e-10 * np.abs(M).max()
        inv = np.column_stack([lu_solve(f, e) for e in np.eye(n)])
        np.testing.assert_allclose(M @ inv, np.eye(n), atol=1e-8)


def test_residual_tiny_on_dataset(small_samples):
    for s in small_samples:
        assert residual_norm(s.system, solve(s.system)) <= 1e-20


def test_sparse_input_accepted():
    A = sp.csr_matrix(np.array([[4.0, 1.0], [1.0, 3.0]]))
    sys_ = LinearSystem(A, np.array([1.0, 2.0]), np.zeros(0, int), np.zeros(0))
    np.testing.assert_allclose(A @ solve(sys_), [1.0, 2.0], atol=1e-14)


def test_timed_compare_three_node_mesh():
    tri = DomainShape(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]]))
    mesh = triangulate(tri, 2.0)
    system = assemble(mesh, FieldSpec([1.0], [0.4], 0))
    graph = build_graph(mesh, system)
    c = timed_compare(graph, system, ModelParams.init(SMALL), 3)
    assert c.gnn_time > 0 and c.lu_time > 0
    assert c.error == 0.0
    assert len(c.residuals) == 4


def test_timed_compare_values_deterministic(small_samples):
    p = ModelParams.init(SMALL)
    s = small_samples[0]
    a = timed_compare(s.graph, s.system, p, 4)
    b = timed_compare(s.graph, None, p, 4)
    assert a.error == b.error and a.relative_error == b.relative_error
    assert np.array_equal(a.residuals, b.residuals) and np.array_equal(a.U_gnn, b.U_gnn)
    assert a.ratio == a.lu_time / a.gnn_time
    assert a.error > 0 and a.residuals[-1] > 0


def test_exact_solver_double(small_samples):
    s = small_samples[1]
    U = solve(s.system)
    c = timed_compare(s.graph, s.system, None, 3, solver=lambda g, p, k: [U] * (k + 1))
    assert c.error == 0.0 and c.relative_error == 0.0
    assert c.residuals[-1] <= 1e-10


def _textbook_lu(M):
    """Unblocked elimination, one column at a time."""
    a = np.array(M, dtype=float)
    n = len(a)
    perm = list(range(n))
    for k in range(n):
        p = max(range(k, n), key=lambda i: abs(a[i, k]))
        a[[k, p]] = a[[p, k]]
        perm[k], perm[p] = perm[p], perm[k]
        for i in range(k + 1, n):
            a[i, k] /= a[k, k]
            a[i, k + 1:] -= a[i, k] * a[k, k + 1:]
    return a, np.array(perm)


@pytest.mark.parametrize("n", [63, 64, 65, 150])
def test_blocked_matches_textbook(n):
    M = np.random.default_rng(n).normal(size=(n, n))
    f = lu_factor(M)
    lu, perm = _textbook_lu(M)
    np.testing.assert_array_equal(f.perm, perm)
    np.testing.assert_allclose(f.lu, lu, rtol=1e-9, atol=1e-9)
    assert np.max(np.abs(f.P @ M - f.L @ f.U)) < 1e-11 * n
