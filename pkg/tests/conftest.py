import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hogwild_gnn import kernels
from hogwild_gnn.graph import Graph

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = kernels.available()

_ACCEPTANCE: list = []


def random_graph(n: int, seed: int, p: int = 2, r: int = 1, extra: float = 0.3, y=None) -> Graph:
    """Connected random graph: a random spanning tree plus extra edges."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pairs = {tuple(sorted((int(perm[i]), int(perm[rng.integers(0, i)])))) for i in range(1, n)}
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < extra:
                pairs.add((a, b))
    pairs = sorted(pairs)
    edges = np.array(pairs + [(b, a) for a, b in pairs], dtype=np.int64).reshape(-1, 2)
    e = None
    if r:
        ef = rng.uniform(0.1, 1.0, size=(len(pairs), r))
        e = np.concatenate([ef, ef]) if len(pairs) else np.zeros((0, r))
    x = rng.standard_normal((n, p))
    if y is None:
        y = rng.integers(0, 2, size=(n, 1)).astype(float)
    return Graph.build(n, edges, x, e=e, y=y)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def g6():
    return random_graph(6, 0)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


def scramble(model, seed: int, scale: float = 1.5) -> dict:
    """Feasible parameters pushed away from the initialization."""
    from hogwild_gnn.nn import project_constraints

    rng = np.random.default_rng(seed)
    P = model.init_params(rng)
    P = {k: v * rng.uniform(0.5, scale) + 0.3 * rng.standard_normal(v.shape) for k, v in P.items()}
    return project_constraints(P, model.constraints())
