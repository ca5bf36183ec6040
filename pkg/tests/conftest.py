import numpy as np
import pytest


def clustered_weights(n, d, n_clusters=40, spread=0.6, seed=0):
    """Unit-norm rows scattered around random cluster directions."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    rows = centers[rng.integers(n_clusters, size=n)] + spread / np.sqrt(d) * rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def noisy_queries(W, n_queries, noise=1.0, seed=1):
    """Queries near randomly chosen rows of ``W``, with their source labels."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(W.shape[0], size=n_queries)
    X = W[labels] + noise / np.sqrt(W.shape[1]) * rng.normal(size=(n_queries, W.shape[1]))
    return X, labels


@pytest.fixture(scope="session")
def snapshot_2000x32():
    W = clustered_weights(2000, 32, seed=11)
    X, labels = noisy_queries(W, 200, seed=12)
    return W, X, labels


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
