import os
import sys

import numpy as np
import pytest
from hypothesis import settings

from glomia.tud import Corpus, FeatureMode, Graph

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_graph(rng, n, d, p=0.4, label=0, source_id=1, scale=1.0):
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p]
    return Graph.from_edge_list(n, pairs, scale * rng.normal(size=(n, d)), label, source_id)


def separable_corpus(count=40, classes=2, d=4, seed=0, name="TOY"):
    """Graphs whose class shifts the feature mean, so small models can overfit them."""
    rng = np.random.default_rng(seed)
    graphs = []
    for i in range(count):
        y = i % classes
        n = int(rng.integers(4, 10))
        g = random_graph(rng, n, d, 0.35, y, i + 1)
        graphs.append(g.with_features(g.features + 0.8 * y))
    return Corpus(name, tuple(graphs), classes, FeatureMode.ATTRIBUTES_ONLY)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_corpus():
    return separable_corpus()


_acceptance_ran = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_criterion_" in report.nodeid:
        _acceptance_ran.append(int(report.nodeid.split("test_criterion_")[1].split("_")[0]))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_ran:
        return
    import test_acceptance

    terminalreporter.section("acceptance criteria")
    for k in sorted(set(_acceptance_ran)):
        line = test_acceptance.RESULTS.get(k, f"[FAIL] criterion {k}: error before a result was recorded")
        terminalreporter.write_line(line)
