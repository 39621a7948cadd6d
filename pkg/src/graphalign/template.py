"""Neighbor Detail Template: fixed-shape computational trees flattened level-order."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .graph import GraphError, TextGraph

PAD = -1


def tree_length(s: int, h: int) -> int:
    """Number of slots in a complete ``s``-ary tree of depth ``h``."""
    if s == 1:
        return h + 1
    return (s ** (h + 1) - 1) // (s - 1)


@dataclass(frozen=True)
class NodeSequence:
    center: int
    entries: tuple[int, ...]
    s: int
    h: int

    def __post_init__(self) -> None:
        if len(self.entries) != tree_length(self.s, self.h):
            raise ValueError("entries length does not match (s, h)")
        if self.entries[0] != self.center or self.center == PAD:
            raise ValueError("entries[0] must be the center node")

    def __len__(self) -> int:
        return len(self.entries)

    def children(self, p: int) -> range:
        return range(p * self.s + 1, p * self.s + self.s + 1)

    def to_json(self) -> dict:
        return {"center": self.center, "s": self.s, "h": self.h, "entries": list(self.entries)}

    @classmethod
    def from_json(cls, obj: dict) -> "NodeSequence":
        return cls(int(obj["center"]), tuple(int(e) for e in obj["entries"]), int(obj["s"]), int(obj["h"]))


class GraphTemplate(Protocol):
    """Anything that turns a center node into a node sequence."""

    def describe(self, graph: TextGraph, v: int, seed: int) -> NodeSequence: ...


def _child_rng(seed: int, center: int, position: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, center, position]))


def build_tree(graph: TextGraph, v: int, s: int, h: int, seed: int) -> NodeSequence:
    """Sample the computational tree rooted at ``v`` and flatten it level-order.

    Children of a slot are drawn from all graph neighbours of its node, the
    parent included. Up to ``s`` neighbours are listed in ascending id order and
    padded; more than ``s`` are subsampled without replacement from a stream
    keyed on ``(seed, v, slot)``, so every subtree samples independently.
    """
    graph._check_node(v)
    if s < 1 or h < 1:
        raise GraphError("s and h must both be >= 1")
    n_internal = tree_length(s, h - 1)
    entries = [PAD] * tree_length(s, h)
    entries[0] = v
    for p in range(n_internal):
        node = entries[p]
        if node == PAD:
            continue
        nbrs = graph.adjacency[node]
        if len(nbrs) > s:
            picked = _child_rng(seed, v, p).choice(len(nbrs), size=s, replace=False)
            kids = [nbrs[i] for i in picked]
        else:
            kids = list(nbrs)
        first = p * s + 1
        entries[first : first + len(kids)] = kids
    return NodeSequence(v, tuple(entries), s, h)


@dataclass(frozen=True)
class NeighborDetailTemplate:
    s: int = 10
    h: int = 2

    def describe(self, graph: TextGraph, v: int, seed: int) -> NodeSequence:
        return build_tree(graph, v, self.s, self.h, seed)


def sequence_embeddings(graph: TextGraph, seq: NodeSequence) -> np.ndarray:
    """Feature rows for each slot; PAD slots are zero vectors."""
    out = np.zeros((len(seq), graph.feature_dim))
    for i, e in enumerate(seq.entries):
        if e == PAD:
            continue
        graph._check_node(e)
        x = graph.nodes[e].features
        if x.shape != (graph.feature_dim,):
            raise GraphError(f"node {e} feature length {x.shape} != {graph.feature_dim}")
        out[i] = x
    return out
