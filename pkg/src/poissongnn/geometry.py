"""Random 2-D domains and their unstructured triangular meshes.

Domains are star-shaped polygons fitted into the unit square.  Meshes are
conforming Delaunay triangulations refined by circumcenter insertion until
every triangle is shorter than a target edge length.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path
from scipy.spatial import Delaunay


class NodeKind(IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2


@dataclass(frozen=True, eq=False)
class DomainShape:
    vertices: np.ndarray  # (m, 2), counter-clockwise
    seed: int | None = None


@dataclass(frozen=True)
class DomainConfig:
    min_vertices: int = 6
    max_vertices: int = 12
    mean_radius: float = 0.375
    # radii are mean_radius * (1 +/- radial_perturbation)
    radial_perturbation: float = 1.0 / 3.0
    # fraction of the regular angular spacing used as angle jitter
    angular_jitter: float = 0.8
    min_interior_angle_deg: float = 30.0
    max_retries: int = 200


@dataclass(frozen=True, eq=False)
class Mesh:
    coords: np.ndarray  # (n, 2)
    triangles: np.ndarray  # (t, 3), counter-clockwise
    boundary_edges: np.ndarray  # (b, 2), consecutive edges of the CCW boundary loop
    boundary_normals: np.ndarray  # (b, 2), unit outward normals
    node_kind: np.ndarray  # (n,) NodeKind values

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return self.boundary_edges[:, 0]

    def edges(self) -> np.ndarray:
        return mesh_edges(self.triangles)


@dataclass(frozen=True)
class BoundaryPolicy:
    """How the boundary loop is split into Dirichlet and Neumann arcs.

    ``name`` is one of ``"all_dirichlet"``, ``"half_split"`` or
    ``"random_arc"``.  For ``"random_arc"`` one contiguous Neumann arc covering
    a uniformly drawn fraction of the boundary edges is placed at a random
    start edge.
    """

    name: str = "random_arc"
    neumann_fraction: tuple[float, float] = (0.2, 0.5)


# ---------------------------------------------------------------------------
# polygon helpers


def signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def point_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd ray casting, vectorized over ``points``."""
    points = np.atleast_2d(points)
    px = points[:, 0][:, None]
    py = points[:, 1][:, None]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    hits = straddle & (px < xcross)
    return (np.count_nonzero(hits, axis=1) % 2) == 1


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 != 0 and d3 * d4 != 0:
        return True

    def on_segment(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    return ((d1 == 0 and on_segment(q1, q2, p1)) or (d2 == 0 and on_segment(q1, q2, p2))
            or (d3 == 0 and on_segment(p1, p2, q1)) or (d4 == 0 and on_segment(p1, p2, q2)))


def is_simple_polygon(poly: np.ndarray) -> bool:
    m = len(poly)
    for i in range(m):
        for j in range(i + 1, m):
            if j == i + 1 or (i == 0 and j == m - 1):
                continue
            if _segments_intersect(poly[i], poly[(i + 1) % m], poly[j], poly[(j + 1) % m]):
                return False
    return True


def interior_angles(poly: np.ndarray) -> np.ndarray:
    """Interior angles (radians) of a CCW polygon."""
    prev = np.roll(poly, 1, axis=0) - poly
    nxt = np.roll(poly, -1, axis=0) - poly
    cross = nxt[:, 0] * prev[:, 1] - nxt[:, 1] * prev[:, 0]
    dot = np.sum(nxt * prev, axis=1)
    ang = np.arctan2(cross, dot)
    return np.mod(ang, 2 * np.pi)


# ---------------------------------------------------------------------------
# domains


def _fit_unit_square(pts: np.ndarray) -> np.ndarray:
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    scale = 1.0 / float(np.max(hi - lo))
    out = (pts - 0.5 * (lo + hi)) * scale + 0.5
    return np.clip(out, 0.0, 1.0)


def _valid_domain(poly: np.ndarray, config: DomainConfig) -> bool:
    if len(poly) < 3 or signed_area(poly) <= 0:
        return False
    if np.any(poly < 0) or np.any(poly > 1):
        return False
    seg = np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1)
    if seg.min() < 1e-3:
        return False
    if np.degrees(interior_angles(poly)).min() < config.min_interior_angle_deg:
        return False
    return is_simple_polygon(poly)


def sample_domain(seed: int, config: DomainConfig = DomainConfig()) -> DomainShape:
    """Draw a random star-shaped CCW polygon inside the unit square.

    Vertices sit at jittered, increasing angles around the origin with
    perturbed radii; the polygon is then scaled and centered so that its
    bounding box spans the unit square along its longer side.  Degenerate
    draws are rejected and redrawn from the same generator.
    """
    if config.min_vertices < 3 or config.max_vertices < config.min_vertices:
        raise ValueError("invalid vertex-count range")
    rng = np.random.default_rng(seed)
    for _ in range(config.max_retries):
        m = int(rng.integers(config.min_vertices, config.max_vertices + 1))
        spacing = 2 * np.pi / m
        jitter = rng.uniform(-0.5, 0.5, size=m + 1) * config.angular_jitter
        theta = np.pi / 4 + spacing * (np.arange(m) + jitter[:m] + jitter[m])
        radii = config.mean_radius * (1 + config.radial_perturbation * rng.uniform(-1, 1, size=m))
        pts = np.column_stack([radii * np.cos(theta), radii * np.sin(theta)])
        pts = _fit_unit_square(pts)
        if _valid_domain(pts, config):
            return DomainShape(pts, seed)
    raise RuntimeError(f"no valid domain after {config.max_retries} draws (seed={seed})")


# ---------------------------------------------------------------------------
# meshing


def mesh_edges(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges (i < j) of a triangle list, lexicographically sorted."""
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _triangle_metrics(P: np.ndarray, tris: np.ndarray):
    a, b, c = P[tris[:, 0]], P[tris[:, 1]], P[tris[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    lengths = np.column_stack([la, lb, lc])
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    area = 0.5 * np.abs(cross)
    # smallest angle is opposite the shortest side
    lmin = lengths.min(axis=1)
    R = la * lb * lc / (4 * np.maximum(area, 1e-300))
    min_angle = np.arcsin(np.clip(lmin / (2 * R), 0, 1))
    # circumcenters
    d = 2 * cross
    a2 = np.sum(a * a, axis=1)
    b2 = np.sum(b * b, axis=1)
    c2 = np.sum(c * c, axis=1)
    ux = (a2 * (b[:, 1] - c[:, 1]) + b2 * (c[:, 1] - a[:, 1]) + c2 * (a[:, 1] - b[:, 1])) / d
    uy = (a2 * (c[:, 0] - b[:, 0]) + b2 * (a[:, 0] - c[:, 0]) + c2 * (b[:, 0] - a[:, 0])) / d
    return lengths.max(axis=1), min_angle, np.column_stack([ux, uy]), R


def triangulate(shape: DomainShape, target_edge_length: float, min_angle_deg: float = 20.0,
                max_rounds: int = 400) -> Mesh:
    """Conforming Delaunay mesh of ``shape`` with edges no longer than the target.

    The boundary is first split into pieces of length at most
    ``target_edge_length``.  Refinement then alternates between splitting
    boundary segments missing from (or encroached in) the Delaunay
    triangulation and inserting circumcenters of triangles that are too long
    or, above half the target size, have an angle below ``min_angle_deg``.
    All boundary nodes are labeled Dirichlet; use ``assign_boundary_kinds``
    to change that.
    """
    h = float(target_edge_length)
    if not h > 0 or not math.isfinite(h):
        raise ValueError("target_edge_length must be positive")
    poly = np.asarray(shape.vertices, dtype=float)
    min_angle = math.radians(min_angle_deg)
    # smallest boundary piece we are still willing to split for quality reasons
    split_floor = 0.25 * h

    points: list[np.ndarray] = []
    loop: list[int] = []
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        k = max(1, math.ceil(np.linalg.norm(b - a) / h - 1e-9))
        for s in range(k):
            loop.append(len(points))
            points.append(a + (b - a) * (s / k))

    def split(positions: set[int]) -> None:
        # insert from the back so earlier positions stay valid
        for pos in sorted(positions, reverse=True):
            i, j = loop[pos], loop[(pos + 1) % len(loop)]
            points.append(0.5 * (points[i] + points[j]))
            loop.insert(pos + 1, len(points) - 1)

    for _ in range(max_rounds):
        P = np.asarray(points)
        simplices = Delaunay(P).simplices
        # qhull returns flat simplices along collinear hull points
        sa, sb, sc = P[simplices[:, 0]], P[simplices[:, 1]], P[simplices[:, 2]]
        cross = ((sb[:, 0] - sa[:, 0]) * (sc[:, 1] - sa[:, 1])
                 - (sb[:, 1] - sa[:, 1]) * (sc[:, 0] - sa[:, 0]))
        simplices = simplices[np.abs(cross) > 1e-10 * h * h]
        edge_set = set(map(tuple, mesh_edges(simplices).tolist()))
        L = np.asarray(loop)
        Lnext = np.roll(L, -1)
        missing = {pos for pos in range(len(L))
                   if (min(L[pos], Lnext[pos]), max(L[pos], Lnext[pos])) not in edge_set}
        if missing:
            split(missing)
            continue

        inside = point_in_polygon(P[simplices].mean(axis=1), poly)
        tris = simplices[inside]
        longest, tmin, centers, R = _triangle_metrics(P, tris)
        bad = (longest > h * (1 + 1e-9)) | ((tmin < min_angle) & (longest > 0.5 * h))
        if not np.any(bad):
            break

        mid = 0.5 * (P[L] + P[Lnext])
        r2 = 0.25 * np.sum((P[Lnext] - P[L]) ** 2, axis=1)
        seg_len = np.sqrt(4 * r2)
        order = np.argsort(-R[bad], kind="stable")
        cand, cand_R = centers[bad][order], R[bad][order]
        accepted: list[np.ndarray] = []
        accepted_r: list[float] = []
        to_split: set[int] = set()
        cand_inside = point_in_polygon(cand, poly)
        for c, rc, ins in zip(cand, cand_R, cand_inside):
            enc = np.flatnonzero(np.sum((mid - c) ** 2, axis=1) < r2 * (1 - 1e-12))
            if enc.size:
                to_split.update(int(s) for s in enc if seg_len[s] > split_floor)
                continue
            if not ins:
                continue
            if accepted:
                dist = np.linalg.norm(np.asarray(accepted) - c, axis=1)
                if np.any(dist < 0.5 * np.minimum(rc, np.asarray(accepted_r))):
                    continue
            accepted.append(c)
            accepted_r.append(rc)
        if not accepted and not to_split:
            break
        points.extend(accepted)
        split(to_split)
    else:
        raise RuntimeError("mesh refinement did not converge")

    return _build_mesh(P, tris, L)


def _build_mesh(P: np.ndarray, tris: np.ndarray, loop: np.ndarray) -> Mesh:
    used = np.unique(tris)
    remap = -np.ones(len(P), dtype=np.int64)
    remap[used] = np.arange(len(used))
    coords = P[used]
    tris = remap[tris]
    a, b, c = coords[tris[:, 0]], coords[tris[:, 1]], coords[tris[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = cross < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    loop = remap[loop]
    if np.any(loop < 0):
        raise RuntimeError("boundary node not covered by any triangle")
    bedges = np.column_stack([loop, np.roll(loop, -1)])
    d = coords[bedges[:, 1]] - coords[bedges[:, 0]]
    normals = np.column_stack([d[:, 1], -d[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    kind = np.full(len(coords), NodeKind.INTERIOR, dtype=np.int8)
    kind[loop] = NodeKind.DIRICHLET
    return Mesh(coords, tris.astype(np.int64), bedges.astype(np.int64), normals, kind)


def calibrate_edge_length(shape: DomainShape, target_nodes: int, node_range: tuple[int, int] = (300, 600),
                          rel_tol: float = 0.05, max_iter: int = 40) -> tuple[float, Mesh]:
    """Bisect the target edge length until the mesh has about ``target_nodes`` nodes.

    Stops once the node count is within ``rel_tol`` of the target (and inside
    ``node_range``); otherwise returns the closest in-range mesh found.
    """
    lo_n, hi_n = node_range
    if not lo_n <= target_nodes <= hi_n:
        raise ValueError("target_nodes outside node_range")
    area = signed_area(shape.vertices)
    # equilateral mesh: about 2 triangles of area sqrt(3)/4 h^2 per node
    h = math.sqrt(2 * area / (math.sqrt(3) * target_nodes))
    h_small, h_big = None, None
    best = None
    for _ in range(max_iter):
        mesh = triangulate(shape, h)
        n = mesh.n_nodes
        if lo_n <= n <= hi_n and (best is None or abs(n - target_nodes) < abs(best[1].n_nodes - target_nodes)):
            best = (h, mesh)
        if abs(n - target_nodes) <= rel_tol * target_nodes and lo_n <= n <= hi_n:
            return h, mesh
        if n > target_nodes:
            h_small = h
        else:
            h_big = h
        if h_small is not None and h_big is not None:
            h = math.sqrt(h_small * h_big)
        elif h_small is not None:
            h = h * 1.25
        else:
            h = h / 1.25
    if best is None:
        raise RuntimeError("could not reach the requested node range")
    return best


# ---------------------------------------------------------------------------
# boundary labels and graph metrics


def assign_boundary_kinds(mesh: Mesh, policy: BoundaryPolicy | str = BoundaryPolicy(), seed: int = 0) -> Mesh:
    """Label contiguous boundary arcs Dirichlet or Neumann.

    Labels are drawn per boundary edge; a node is Dirichlet if it touches at
    least one Dirichlet edge, so corners between arcs are Dirichlet.
    """
    if isinstance(policy, str):
        policy = BoundaryPolicy(policy)
    nb = len(mesh.boundary_edges)
    edge_is_neumann = np.zeros(nb, dtype=bool)
    if policy.name == "all_dirichlet":
        pass
    elif policy.name == "half_split":
        edge_is_neumann[nb // 2:] = True
    elif policy.name == "random_arc":
        rng = np.random.default_rng(seed)
        lo, hi = policy.neumann_fraction
        frac = rng.uniform(lo, hi)
        start = int(rng.integers(nb))
        count = int(round(frac * nb))
        edge_is_neumann[(start + np.arange(count)) % nb] = True
    else:
        raise ValueError(f"unknown boundary policy {policy.name!r}")

    kind = np.full(mesh.n_nodes, NodeKind.INTERIOR, dtype=np.int8)
    bn = mesh.boundary_edges
    kind[bn[edge_is_neumann].ravel()] = NodeKind.NEUMANN
    kind[bn[~edge_is_neumann].ravel()] = NodeKind.DIRICHLET
    if not np.any(kind == NodeKind.DIRICHLET):
        raise ValueError("boundary policy leaves no Dirichlet node")
    return replace(mesh, node_kind=kind)


def edge_list_diameter(n: int, edges: np.ndarray) -> int:
    """Exact unweighted diameter of an undirected graph given as an edge list."""
    if n == 1:
        return 0
    edges = np.asarray(edges)
    adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise ValueError("graph is disconnected")
    dist = shortest_path(adj, directed=False, unweighted=True)
    return int(dist.max())


def graph_diameter(mesh: Mesh) -> int:
    return edge_list_diameter(mesh.n_nodes, mesh.edges())


def hop_distance(n: int, edges: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Unweighted hop distance from the nearest of ``sources`` (inf if unreachable)."""
    edges = np.asarray(edges)
    adj = coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n)).tocsr()
    dist = shortest_path(adj, directed=False, unweighted=True, indices=np.asarray(sources))
    return np.atleast_2d(dist).min(axis=0)
