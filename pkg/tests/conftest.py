import itertools
import os

import numpy as np
import pytest

from dggat.molio import Atom, Molecule

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")

_ACCEPTANCE = pytest.StashKey[list]()


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def read_fixture(name):
    with open(fixture_path(name), encoding="utf-8") as fh:
        return fh.read()


def numeric_grad(f, t, h=1e-5):
    """Central differences of scalar ``f()`` with respect to every entry of ``t.data``."""
    g = np.zeros_like(t.data)
    for idx in np.ndindex(t.shape):
        old = t.data[idx]
        t.data[idx] = old + h
        fp = f()
        t.data[idx] = old - h
        fm = f()
        t.data[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def random_connected_bonds(rng, n, extra=2):
    """Random spanning tree plus up to ``extra`` additional edges, as (i, j, 1) triples."""
    bonds = {(int(rng.integers(0, k)), k) for k in range(1, n)}
    pairs = [p for p in itertools.combinations(range(n), 2) if p not in bonds]
    for k in rng.permutation(len(pairs))[: int(rng.integers(0, extra + 1))]:
        bonds.add(pairs[k])
    return sorted((i, j, 1) for i, j in bonds)


def random_molecule(rng, n, name="m", elements=(1, 6, 7, 8)):
    bonds = random_connected_bonds(rng, n)
    atoms = tuple(
        Atom(int(rng.choice(elements)), tuple(float(c) for c in rng.normal(scale=1.5, size=3)))
        for _ in range(n)
    )
    return Molecule(name, atoms, tuple(bonds), {"y": float(rng.normal())})


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class _Acceptance:
    def __init__(self, lines):
        self.lines = lines

    def _record(self, line):
        self.lines.append(line)
        print(line)

    def __call__(self, number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        self._record(line)
        assert ok, line

    def skip(self, number, title, reason):
        self._record(f"[SKIP] criterion {number}: {title} ({reason})")
        pytest.skip(reason)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL/SKIP line per acceptance criterion, then assert it."""
    return _Acceptance(request.config.stash.setdefault(_ACCEPTANCE, []))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
