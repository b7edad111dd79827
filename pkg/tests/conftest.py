import numpy as np
import pytest

from topocomp.ingestion import LinkSeries, window_and_split
from topocomp.synthetic import abilene_topology, synthetic_link_series


def numeric_grad(f, arr, entries, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. the given flat entries of ``arr``."""
    flat = arr.reshape(-1)
    out = np.empty(len(entries))
    for i, e in enumerate(entries):
        old = flat[e]
        flat[e] = old + h
        up = f()
        flat[e] = old - h
        down = f()
        flat[e] = old
        out[i] = (up - down) / (2 * h)
    return out


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def small_dataset():
    """About 280 clean Abilene-shaped windows; quick to train on."""
    topo, series = synthetic_link_series("abilene", seed=1, n_intervals=3000)
    return window_and_split(series, 10, 7, topo)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Thirty Abilene links, 40 windows of length 4, with topology (for the MPNN)."""
    rng = np.random.default_rng(5)
    topo = abilene_topology()
    n = topo.n_links
    values = rng.random((n, 160)) * 10 + 1
    series = LinkSeries(values, np.zeros_like(values, dtype=bool), topo.link_names)
    return window_and_split(series, 4, 3, topo)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
