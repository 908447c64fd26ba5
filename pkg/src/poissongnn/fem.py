"""P1 finite elements for -lap(u) = f with Dirichlet and homogeneous Neumann data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import Mesh, NodeKind

DEGENERATE_AREA = 1e-14


def n_monomials(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


def monomial_exponents(degree: int) -> list[tuple[int, int]]:
    """Exponents (p, q) of x^p y^q, grouped by total degree: 1, x, y, x^2, xy, y^2, ..."""
    return [(s - q, q) for s in range(degree + 1) for q in range(s + 1)]


@dataclass(frozen=True, eq=False)
class FieldSpec:
    f_coeffs: np.ndarray
    g_coeffs: np.ndarray
    degree: int

    def __post_init__(self):
        object.__setattr__(self, "f_coeffs", np.asarray(self.f_coeffs, dtype=float))
        object.__setattr__(self, "g_coeffs", np.asarray(self.g_coeffs, dtype=float))
        m = n_monomials(self.degree)
        if self.degree < 0 or len(self.f_coeffs) != m or len(self.g_coeffs) != m:
            raise ValueError(f"degree {self.degree} needs {m} coefficients per polynomial")

    def f(self, points: np.ndarray) -> np.ndarray:
        return evaluate_polynomial(self.f_coeffs, points)

    def g(self, points: np.ndarray) -> np.ndarray:
        return evaluate_polynomial(self.g_coeffs, points)


def evaluate_polynomial(coeffs, points) -> np.ndarray | float:
    """Evaluate sum c_pq x^p y^q at one point (shape (2,)) or many (shape (m, 2))."""
    coeffs = np.asarray(coeffs, dtype=float)
    degree = 0
    while n_monomials(degree) < len(coeffs):
        degree += 1
    if n_monomials(degree) != len(coeffs):
        raise ValueError(f"{len(coeffs)} is not a triangular number of coefficients")
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    out = np.zeros(len(pts))
    for c, (p, q) in zip(coeffs, monomial_exponents(degree)):
        out += c * x**p * y**q
    return float(out[0]) if single else out


@dataclass(frozen=True, eq=False)
class LinearSystem:
    A: sp.csr_matrix
    B: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]


def _signed_areas(p: np.ndarray) -> np.ndarray:
    """Signed areas for triangles given as (..., 3, 2)."""
    a, b, c = p[..., 0, :], p[..., 1, :], p[..., 2, :]
    return 0.5 * ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                  - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))


def _check_areas(area: np.ndarray) -> None:
    if np.any(np.abs(area) <= DEGENERATE_AREA):
        raise ValueError("degenerate triangle (area <= 1e-14)")


def local_stiffness(triangle_coords) -> np.ndarray:
    """3x3 element matrix  K_ij = area * grad(phi_i) . grad(phi_j)."""
    return _stiffness_batch(np.asarray(triangle_coords, dtype=float)[None])[0]


def _stiffness_batch(p: np.ndarray) -> np.ndarray:
    area = _signed_areas(p)
    _check_areas(area)
    # edge opposite vertex i, traversed p[i+1] -> p[i+2]
    e = p[:, [2, 0, 1], :] - p[:, [1, 2, 0], :]
    return np.einsum("tik,tjk->tij", e, e) / (4.0 * np.abs(area))[:, None, None]


def local_load(triangle_coords, f_at_vertices) -> np.ndarray:
    """Vertex-lumped load vector: (area / 3) * f at each vertex."""
    area = _signed_areas(np.asarray(triangle_coords, dtype=float))
    _check_areas(np.atleast_1d(area))
    return abs(area) / 3.0 * np.asarray(f_at_vertices, dtype=float)


def stiffness_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Assembled Laplacian with natural (Neumann) conditions everywhere."""
    T = mesh.triangles
    K = _stiffness_batch(mesh.coords[T])
    rows = np.repeat(T, 3, axis=1).ravel()
    cols = np.tile(T, (1, 3)).ravel()
    A = sp.coo_matrix((K.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def load_vector(mesh: Mesh, spec: FieldSpec) -> np.ndarray:
    T = mesh.triangles
    area = np.abs(_signed_areas(mesh.coords[T]))
    _check_areas(area)
    fv = spec.f(mesh.coords)
    return np.bincount(T.ravel(), weights=(area[:, None] / 3.0 * fv[T]).ravel(),
                       minlength=mesh.n_nodes)


def assemble(mesh: Mesh, spec: FieldSpec) -> LinearSystem:
    """Assemble AU = B; Dirichlet rows become unit rows with b_i = g(x_i).

    Neumann data is homogeneous and therefore natural: no boundary term.
    """
    A = stiffness_matrix(mesh).tocoo()
    B = load_vector(mesh, spec)
    dnodes = np.flatnonzero(mesh.node_kind == NodeKind.DIRICHLET)
    gvals = spec.g(mesh.coords[dnodes]) if len(dnodes) else np.zeros(0)
    is_d = np.zeros(mesh.n_nodes, dtype=bool)
    is_d[dnodes] = True
    keep = ~is_d[A.row]
    rows = np.concatenate([A.row[keep], dnodes])
    cols = np.concatenate([A.col[keep], dnodes])
    vals = np.concatenate([A.data[keep], np.ones(len(dnodes))])
    A = sp.csr_matrix((vals, (rows, cols)), shape=A.shape)
    A.sort_indices()
    B = B.copy()
    B[dnodes] = gvals
    return LinearSystem(A, B, dnodes, gvals)


def residual_norm(system: LinearSystem, U) -> float:
    """Squared residual  sum_i (-b_i + sum_j a_ij u_j)^2."""
    U = np.asarray(U, dtype=float)
    if U.shape != (system.n,):
        raise ValueError(f"expected a vector of length {system.n}, got shape {U.shape}")
    r = system.A @ U - system.B
    return float(r @ r)


def residual_l2(system: LinearSystem, U) -> float:
    return float(np.sqrt(residual_norm(system, U)))


# Symmetric 6-point rule on the reference triangle, exact for degree 4.
_Q_A, _Q_B = 0.445948490915965, 0.091576213509771
_Q_BARY = np.array([
    [_Q_A, _Q_A, 1 - 2 * _Q_A], [_Q_A, 1 - 2 * _Q_A, _Q_A], [1 - 2 * _Q_A, _Q_A, _Q_A],
    [_Q_B, _Q_B, 1 - 2 * _Q_B], [_Q_B, 1 - 2 * _Q_B, _Q_B], [1 - 2 * _Q_B, _Q_B, _Q_B],
])
_Q_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


def l2_error(mesh: Mesh, U, exact) -> float:
    """L2 norm of (P1 interpolant of U) - exact, with a degree-4 quadrature."""
    T = mesh.triangles
    P = mesh.coords[T]
    area = np.abs(_signed_areas(P))
    qp = np.einsum("qk,tkd->tqd", _Q_BARY, P)
    uh = np.einsum("qk,tk->tq", _Q_BARY, np.asarray(U)[T])
    ue = exact(qp.reshape(-1, 2)).reshape(uh.shape)
    return float(np.sqrt(np.sum(area[:, None] * _Q_W[None] * (uh - ue) ** 2)))
