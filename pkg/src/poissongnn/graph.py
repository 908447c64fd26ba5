"""Graph view of an assembled Poisson problem.

Nodes are mesh nodes.  Every mesh edge becomes a pair of directed edges,
except that Dirichlet nodes only send: no edge ends at a Dirichlet node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import FieldSpec, LinearSystem
from .geometry import Mesh, NodeKind


@dataclass(frozen=True, eq=False)
class GraphProblem:
    node_kind: np.ndarray  # (n,)
    coords: np.ndarray  # (n, 2)
    edge_src: np.ndarray  # (E,)
    edge_dst: np.ndarray  # (E,)
    edge_attr: np.ndarray  # (E, 3): dx, dy, dist
    A: sp.csr_matrix  # row i holds a_ii and the neighbor coefficients a_ij
    forcing: np.ndarray  # (n,) right-hand side b_i
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray
    spec: FieldSpec | None = None

    @property
    def n(self) -> int:
        return len(self.node_kind)

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    def nodes_of(self, kind: NodeKind) -> np.ndarray:
        return np.flatnonzero(self.node_kind == kind)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.A.indptr[i], self.A.indptr[i + 1]
        return self.A.indices[lo:hi], self.A.data[lo:hi]

    def apply_rows(self, U: np.ndarray) -> np.ndarray:
        """A @ U rebuilt from the per-node rows."""
        out = np.zeros(self.n)
        for i in range(self.n):
            cols, vals = self.row(i)
            out[i] = vals @ U[cols]
        return out

    def undirected_edges(self) -> np.ndarray:
        e = np.sort(np.column_stack([self.edge_src, self.edge_dst]), axis=1)
        return np.unique(e, axis=0)


def _pattern_pairs(A: sp.csr_matrix, rows: np.ndarray) -> set[tuple[int, int]]:
    A = A.tocoo()
    mask = np.isin(A.row, rows) & (A.row != A.col)
    return set(zip(A.row[mask].tolist(), A.col[mask].tolist()))


def build_graph(mesh: Mesh, system: LinearSystem, spec: FieldSpec | None = None) -> GraphProblem:
    kind = np.asarray(mesh.node_kind)
    if system.n != mesh.n_nodes:
        raise ValueError("system and mesh sizes differ")
    und = mesh.edges()
    is_d = kind == NodeKind.DIRICHLET
    if not np.array_equal(np.flatnonzero(is_d), np.sort(system.dirichlet_nodes)):
        raise ValueError("Dirichlet nodes of system and mesh differ")

    free = np.flatnonzero(~is_d)
    expected = {(i, j) for i, j in und.tolist() if not is_d[i]}
    expected |= {(j, i) for i, j in und.tolist() if not is_d[j]}
    if _pattern_pairs(system.A, free) != expected:
        raise ValueError("system row sparsity disagrees with the mesh edges")

    src = np.concatenate([und[:, 0], und[:, 1]])
    dst = np.concatenate([und[:, 1], und[:, 0]])
    keep = ~is_d[dst]
    src, dst = src[keep], dst[keep]
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    d = mesh.coords[dst] - mesh.coords[src]
    attr = np.column_stack([d, np.linalg.norm(d, axis=1)])
    return GraphProblem(
        node_kind=kind.copy(),
        coords=mesh.coords.copy(),
        edge_src=src.astype(np.int64),
        edge_dst=dst.astype(np.int64),
        edge_attr=attr,
        A=system.A.copy(),
        forcing=system.B.copy(),
        dirichlet_nodes=np.asarray(system.dirichlet_nodes, dtype=np.int64).copy(),
        dirichlet_values=np.asarray(system.dirichlet_values, dtype=float).copy(),
        spec=spec,
    )


def initial_state(graph: GraphProblem) -> np.ndarray:
    """Zero everywhere except the Dirichlet values."""
    U0 = np.zeros(graph.n)
    U0[graph.dirichlet_nodes] = graph.dirichlet_values
    return U0


def system_of(graph: GraphProblem) -> LinearSystem:
    return LinearSystem(graph.A, graph.forcing, graph.dirichlet_nodes, graph.dirichlet_values)
