from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def fd_check(build, arrays, eps=1e-5, seed=0):
    """Relative error between backprop and central differences.

    ``build(g, nodes)`` returns an output node; the scalar loss is a fixed
    random projection of it so every output element contributes.
    """
    from grn.numcore import Graph, Node

    nodes = [Node(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    probe = None

    def value():
        nonlocal probe
        out = build(Graph(), nodes).data
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(out.shape)
        return float((out * probe).sum())

    value()
    g = Graph()
    out = build(g, nodes)
    loss = g.sum(g.mul_const(out, probe))
    g.backward(loss)
    worst = 0.0
    for n in nodes:
        num = np.zeros_like(n.data)
        for ix in np.ndindex(n.shape):
            old = n.data[ix]
            n.data[ix] = old + eps
            up = value()
            n.data[ix] = old - eps
            down = value()
            n.data[ix] = old
            num[ix] = (up - down) / (2 * eps)
        ana = n.grad if n.grad is not None else np.zeros_like(n.data)
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-4)
        worst = max(worst, float(err.max()))
    return worst


SCORER_FIXTURES = FIXTURES / "scorer"


def load_scorer_fixture(name: str):
    """(gold, pred) label lists from a ``token gold pred`` fixture."""
    from grn.corpus import parse_conll

    text = (SCORER_FIXTURES / f"{name}.conll").read_text()
    gold = [s.labels for s in parse_conll(text, label_column=1)]
    pred = [s.labels for s in parse_conll(text, label_column=2)]
    return gold, pred


# criterion number -> (title, passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, list] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
