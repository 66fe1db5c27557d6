import numpy as np
import pytest

from layoutfm.geometry import GridSpec, LayerRegistry
from layoutfm.synthgen import CellParams, generate_corpus
from layoutfm.verify import RuleDeck


@pytest.fixture(scope="session")
def registry():
    return LayerRegistry()


@pytest.fixture(scope="session")
def grid():
    return GridSpec(10, 64)


@pytest.fixture(scope="session")
def rules(registry):
    return RuleDeck.default(10, registry)


@pytest.fixture(scope="session")
def corpus():
    """Six small cells shared by the slower tests: [(layout, golden, params)]."""
    return generate_corpus(6, CellParams(), seed=11)


@pytest.fixture(scope="session")
def pairs(corpus):
    return [(lay, net) for lay, net, _ in corpus]


def point_in_polygon(x: float, y: float, poly) -> bool:
    """Even-odd ray cast to +x; pixel centres never lie on grid-aligned edges."""
    inside = False
    n = len(poly)
    for i in range(n):
        (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
        if (ay > y) != (by > y):
            xc = ax + (y - ay) * (bx - ax) / (by - ay)
            if xc > x:
                inside = not inside
    return inside


def brute_raster(polys, origin, h, w, p):
    out = np.zeros((h, w), bool)
    for r in range(h):
        for c in range(w):
            x = origin[0] + (c + 0.5) * p
            y = origin[1] + (r + 0.5) * p
            out[r, c] = any(point_in_polygon(x, y, q) for q in polys)
    return out


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
