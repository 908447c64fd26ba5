"""Dense LU with partial pivoting: the reference solver and timing counterpart."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import LinearSystem, residual_norm
from .graph import GraphProblem, system_of

PIVOT_TOL = 1e-14
BLOCK = 64


class SingularMatrixError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LUFactorization:
    lu: np.ndarray  # unit-lower L below the diagonal, U on and above
    perm: np.ndarray  # (P A)[i] = A[perm[i]]

    @property
    def n(self) -> int:
        return len(self.perm)

    @property
    def L(self) -> np.ndarray:
        return np.tril(self.lu, -1) + np.eye(self.n)

    @property
    def U(self) -> np.ndarray:
        return np.triu(self.lu)

    @property
    def P(self) -> np.ndarray:
        return np.eye(self.n)[self.perm]


def lu_factor(system: LinearSystem | np.ndarray | sp.spmatrix) -> LUFactorization:
    """Doolittle elimination with row pivoting on the largest magnitude entry."""
    if isinstance(system, LinearSystem):
        A = system.A
    else:
        A = system
    a = A.toarray() if sp.issparse(A) else np.array(A, dtype=float)
    n, m = a.shape
    if n != m:
        raise ValueError(f"matrix must be square, got {a.shape}")
    perm = np.arange(n)
    # right-looking blocked form: factor a column panel with row pivoting,
    # solve for the matching block row of U, then one matrix-product update
    for j0 in range(0, n, BLOCK):
        j1 = min(j0 + BLOCK, n)
        for k in range(j0, j1):
            p = k + int(np.argmax(np.abs(a[k:, k])))
            if abs(a[p, k]) < PIVOT_TOL:
                raise SingularMatrixError(f"pivot {abs(a[p, k]):.3e} below {PIVOT_TOL} at column {k}")
            if p != k:
                a[[k, p]] = a[[p, k]]
                perm[[k, p]] = perm[[p, k]]
            a[k + 1:, k] /= a[k, k]
            a[k + 1:, k + 1:j1] -= np.outer(a[k + 1:, k], a[k, k + 1:j1])
        if j1 == n:
            break
        for k in range(j0, j1 - 1):
            a[k + 1:j1, j1:] -= np.outer(a[k + 1:j1, k], a[k, j1:])
        a[j1:, j1:] -= a[j1:, j0:j1] @ a[j0:j1, j1:]
    return LUFactorization(a, perm)


def lu_solve(fact: LUFactorization, B) -> np.ndarray:
    b = np.asarray(B, dtype=float)
    lu = fact.lu
    y = b[fact.perm].copy()
    n = fact.n
    for i in range(1, n):
        y[i] -= lu[i, :i] @ y[:i]
    for i in range(n - 1, -1, -1):
        y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
    return y


def solve(system: LinearSystem) -> np.ndarray:
    return lu_solve(lu_factor(system), system.B)


def rollout_states(graph: GraphProblem, params, k: int) -> list[np.ndarray]:
    from .model import rollout

    return rollout(graph, params, k, keep_latents=False).decoded


@dataclass(frozen=True)
class TimedComparison:
    gnn_time: float
    lu_time: float
    error: float
    relative_error: float
    residuals: np.ndarray  # l2 residual norm after each iteration 0..k
    U_gnn: np.ndarray
    U_lu: np.ndarray

    @property
    def ratio(self) -> float:
        """LU time over network time; above 1 means the network was faster."""
        return self.lu_time / self.gnn_time


def timed_compare(graph: GraphProblem, system: LinearSystem | None, params, k: int = 20,
                  solver=None) -> TimedComparison:
    """Wall-clock the network rollout and LU factor+solve on the same sample.

    ``solver(graph, params, k)`` replaces the network rollout when given; it
    must return the k+1 decoded states.
    """
    system = system if system is not None else system_of(graph)
    if solver is None:
        solver = rollout_states
    t0 = time.perf_counter()
    states = solver(graph, params, k)
    t1 = time.perf_counter()
    U_lu = solve(system)
    t2 = time.perf_counter()
    U = states[-1]
    err = float(np.linalg.norm(U - U_lu))
    ref = float(np.linalg.norm(U_lu))
    residuals = np.array([np.sqrt(residual_norm(system, u)) for u in states])
    return TimedComparison(t1 - t0, t2 - t1, err, err / ref if ref > 0 else float("inf"),
                           residuals, U, U_lu)
