from __future__ import annotations

import numpy as np
import pytest

from graphalign.graph import CategorySpec, NodeRecord, TextGraph, embed_text, make_synthetic

# Worked example from the template description: A..F = 0..5
EXAMPLE_EDGES = [(0, 1), (0, 2), (0, 3), (1, 4), (3, 5)]


def small_graph(n: int, edges, dim: int = 8, labels=None, categories=()) -> TextGraph:
    nodes = [
        NodeRecord(i, f"node {i} text", embed_text(f"node {i} text w{i}", dim), None if labels is None else labels[i])
        for i in range(n)
    ]
    return TextGraph.build(nodes, edges, categories, dim)


@pytest.fixture
def example_graph() -> TextGraph:
    return small_graph(6, EXAMPLE_EDGES)


@pytest.fixture
def path_graph() -> TextGraph:
    return small_graph(6, [(i, i + 1) for i in range(5)])


@pytest.fixture(scope="session")
def synthetic() -> TextGraph:
    return make_synthetic(300, 3, 0.9, seed=1)


@pytest.fixture(scope="session")
def tiny_synthetic() -> TextGraph:
    return make_synthetic(30, 3, 0.8, seed=3, feature_dim=16)


# acceptance lines are collected here and echoed in the terminal summary,
# so they show up even when pytest captures stdout
ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE.append(line)
        print(line, flush=True)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
