import numpy as np
import pytest

from poissongnn.fem import FieldSpec, assemble
from poissongnn.geometry import DomainShape, Mesh, NodeKind, mesh_edges, triangulate
from poissongnn.graph import build_graph
from poissongnn.training import DatasetSpec, Sample, sample_dataset

UNIT_SQUARE = DomainShape(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))


def square_mesh(h: float) -> Mesh:
    return triangulate(UNIT_SQUARE, h)


def five_node_mesh() -> Mesh:
    """Unit square split into four triangles around its center.

    Boundary edges (1,2) and (2,3) are Neumann, so node 2 is the only Neumann
    node; 0, 1, 3 are Dirichlet and the center 4 is Interior.
    """
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.45, 0.55]])
    tris = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    bedges = np.array([[0, 1], [1, 2], [2, 3], [3, 0]])
    d = coords[bedges[:, 1]] - coords[bedges[:, 0]]
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / np.linalg.norm(d, axis=1, keepdims=True)
    kind = np.array([NodeKind.DIRICHLET, NodeKind.DIRICHLET, NodeKind.NEUMANN, NodeKind.DIRICHLET,
                     NodeKind.INTERIOR], dtype=np.int8)
    return Mesh(coords, tris, bedges, normals, kind)


def make_sample(mesh: Mesh, spec: FieldSpec) -> Sample:
    system = assemble(mesh, spec)
    return Sample(mesh, system, build_graph(mesh, system, spec))


def random_spec(rng: np.random.Generator, degree: int = 2) -> FieldSpec:
    m = (degree + 1) * (degree + 2) // 2
    return FieldSpec(rng.uniform(-1, 1, m), rng.uniform(-1, 1, m), degree)


@pytest.fixture(scope="session")
def tiny_sample() -> Sample:
    return make_sample(five_node_mesh(), FieldSpec([0.3, -0.2, 0.5], [0.1, 0.7, -0.4], 1))


@pytest.fixture(scope="session")
def small_samples() -> list[Sample]:
    """Four mixed-boundary problems of 60 to 100 nodes."""
    return sample_dataset(DatasetSpec(num_samples=4, node_range=(60, 100), neumann_probability=1.0, seed=11))


def undirected_edge_count(triangles: np.ndarray) -> int:
    return len(mesh_edges(triangles))


# ---------------------------------------------------------------------------
# acceptance report: one line per criterion in the terminal summary

_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    measured = "; ".join(v for k, v in item.user_properties if k == "measured")
    status = "PASS" if rep.passed else "FAIL"
    if rep.when != "call":
        status, measured = "FAIL", measured or f"error during {rep.when}"
    _CRITERIA[number] = (status, title, measured)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title, measured = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {measured}")


@pytest.fixture
def measured(request):
    """Attach measured values to the criterion's report line."""
    def add(text: str) -> None:
        request.node.user_properties.append(("measured", text))
        print(text)
    return add
