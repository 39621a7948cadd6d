"""Text-attributed graph storage, JSONL I/O, splits and a synthetic generator."""
from __future__ import annotations

import hashlib
import json
import math
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Base class for graph loading and query errors."""


class GraphParseError(GraphError):
    pass


class GraphConsistencyError(GraphError):
    pass


@dataclass(frozen=True)
class CategorySpec:
    name: str
    explanatory_text: str = ""
    soft_token_count: int = 3


@dataclass(frozen=True)
class NodeRecord:
    id: int
    raw_text: str
    features: np.ndarray
    label: int | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NodeRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.raw_text == other.raw_text
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[int]
    val: frozenset[int]
    test: frozenset[int]
    seed: int
    ratios: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class TextGraph:
    """Immutable undirected graph whose nodes carry text, features and labels.

    Nodes are indexed ``0..N-1``. Edges are stored once per unordered pair as
    ``(min, max)`` tuples. Build instances through :meth:`build`, which
    validates every invariant.
    """

    nodes: tuple[NodeRecord, ...]
    edges: frozenset[tuple[int, int]]
    categories: tuple[CategorySpec, ...]
    feature_dim: int
    name: str = "graph"
    entity_noun: str = "paper"

    @classmethod
    def build(
        cls,
        nodes: Sequence[NodeRecord],
        edges: Iterable[tuple[int, int]],
        categories: Sequence[CategorySpec] = (),
        feature_dim: int | None = None,
        name: str = "graph",
        entity_noun: str = "paper",
    ) -> "TextGraph":
        nodes = tuple(sorted(nodes, key=lambda n: n.id))
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            raise GraphConsistencyError("duplicate node id")
        if ids != list(range(len(ids))):
            raise GraphConsistencyError("node ids must be exactly 0..N-1")
        if feature_dim is None:
            if not nodes:
                raise GraphConsistencyError("cannot infer feature_dim from an empty graph")
            feature_dim = int(nodes[0].features.shape[0])
        if feature_dim < 1:
            raise GraphConsistencyError("feature_dim must be positive")
        for n in nodes:
            if n.features.shape != (feature_dim,):
                raise GraphConsistencyError(
                    f"node {n.id} has feature length {n.features.shape}, expected {feature_dim}"
                )
        names = [c.name for c in categories]
        if len(set(names)) != len(names):
            raise GraphConsistencyError("category names must be unique")
        if len({c.soft_token_count for c in categories}) > 1:
            raise GraphConsistencyError("soft_token_count must match across categories")
        for n in nodes:
            if n.label is not None and not 0 <= n.label < len(categories):
                raise GraphConsistencyError(f"node {n.id} label {n.label} has no category")
        stored: set[tuple[int, int]] = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < len(nodes) and 0 <= v < len(nodes)):
                raise GraphConsistencyError(f"edge ({u},{v}) has a dangling endpoint")
            if u == v:
                raise GraphConsistencyError(f"self-loop on node {u}")
            stored.add((min(u, v), max(u, v)))
        return cls(nodes, frozenset(stored), tuple(categories), feature_dim, name, entity_noun)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        adj: list[list[int]] = [[] for _ in self.nodes]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, self.feature_dim))
        return np.stack([n.features for n in self.nodes])

    def neighbors(self, v: int) -> tuple[int, ...]:
        self._check_node(v)
        return self.adjacency[v]

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self.edges

    def labeled_nodes(self) -> list[int]:
        return [n.id for n in self.nodes if n.label is not None]

    def _check_node(self, v: int) -> None:
        if not (isinstance(v, (int, np.integer)) and 0 <= v < len(self.nodes)):
            raise GraphError(f"invalid node id {v!r}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TextGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.edges == other.edges
            and self.categories == other.categories
            and self.feature_dim == other.feature_dim
        )

    __hash__ = None  # type: ignore[assignment]


def neighbors_within(graph: TextGraph, v: int, h: int) -> set[int]:
    """Nodes at shortest-path distance 1..h from ``v`` (``v`` itself excluded)."""
    graph._check_node(v)
    if h < 1:
        raise GraphError("h must be >= 1")
    seen = {v: 0}
    queue = deque([v])
    while queue:
        u = queue.popleft()
        if seen[u] == h:
            continue
        for w in graph.adjacency[u]:
            if w not in seen:
                seen[w] = seen[u] + 1
                queue.append(w)
    del seen[v]
    return set(seen)


# --- toy text embedder ------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def embed_text(text: str, dim: int) -> np.ndarray:
    """Hashed bag-of-tokens embedding, L2-normalised (zero vector for no tokens)."""
    vec = np.zeros(dim)
    for tok in _TOKEN_RE.findall(text.lower()):
        vec[_bucket(tok, dim)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


# --- JSONL I/O ---------------------------------------------------------------

def save_graph(graph: TextGraph, path: str | Path) -> None:
    """Write ``graph`` as category, node, then edge lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps({"graph": {"name": graph.name, "entity": graph.entity_noun}}) + "\n")
        for c in graph.categories:
            rec = {"name": c.name, "explain": c.explanatory_text, "soft_tokens": c.soft_token_count}
            f.write(json.dumps({"category": rec}) + "\n")
        for n in graph.nodes:
            rec = {
                "node": n.id,
                "text": n.raw_text,
                "label": n.label,
                "features": [float(x) for x in n.features],
            }
            f.write(json.dumps(rec) + "\n")
        for u, v in sorted(graph.edges):
            f.write(json.dumps({"edge": [u, v]}) + "\n")


def load_graph(path: str | Path, feature_dim: int | None = None) -> TextGraph:
    """Parse a graph JSONL file.

    Nodes with ``"features": null`` are embedded with :func:`embed_text`; that
    needs either ``feature_dim`` or at least one node with explicit features.
    """
    path = Path(path)
    meta: dict = {}
    categories: list[CategorySpec] = []
    raw_nodes: list[tuple[int, str, int | None, list[float] | None]] = []
    edges: list[tuple[int, int]] = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphParseError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise GraphParseError(f"{path}:{lineno}: expected a JSON object")
            try:
                if "graph" in rec:
                    meta = dict(rec["graph"])
                elif "category" in rec:
                    c = rec["category"]
                    categories.append(
                        CategorySpec(str(c["name"]), str(c.get("explain", "")), int(c.get("soft_tokens", 3)))
                    )
                elif "node" in rec:
                    raw_nodes.append((int(rec["node"]), str(rec["text"]), rec.get("label"), rec.get("features")))
                elif "edge" in rec:
                    u, v = rec["edge"]
                    edges.append((int(u), int(v)))
                else:
                    raise GraphParseError(f"{path}:{lineno}: unknown record type")
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, GraphParseError):
                    raise
                raise GraphParseError(f"{path}:{lineno}: malformed record ({exc})") from exc

    if feature_dim is None:
        for *_, feats in raw_nodes:
            if feats is not None:
                feature_dim = len(feats)
                break
    nodes = []
    for nid, text, label, feats in raw_nodes:
        if feats is None:
            if feature_dim is None:
                raise GraphParseError("no feature vectors present and no feature_dim given")
            x = embed_text(text, feature_dim)
        else:
            x = np.asarray(feats, dtype=np.float64)
        nodes.append(NodeRecord(nid, text, x, None if label is None else int(label)))
    return TextGraph.build(
        nodes,
        edges,
        categories,
        feature_dim,
        name=str(meta.get("name", path.stem)),
        entity_noun=str(meta.get("entity", "paper")),
    )


# --- splits ------------------------------------------------------------------

def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    shares = [r * total for r in ratios]
    sizes = [math.floor(s) for s in shares]
    order = sorted(range(len(ratios)), key=lambda i: (-(shares[i] - sizes[i]), i))
    for i in order[: total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(graph: TextGraph, ratios: Sequence[float], seed: int) -> SplitAssignment:
    """Random train/val/test partition of the labeled nodes."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise GraphError("ratios must be three non-negative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise GraphError(f"ratios must sum to 1, got {sum(ratios)!r}")
    labeled = graph.labeled_nodes()
    if len(labeled) < 3:
        raise GraphError("need at least 3 labeled nodes to split")
    perm = np.random.default_rng(seed).permutation(labeled)
    n_train, n_val, _ = _largest_remainder(len(labeled), ratios)
    return SplitAssignment(
        train=frozenset(int(x) for x in perm[:n_train]),
        val=frozenset(int(x) for x in perm[n_train : n_train + n_val]),
        test=frozenset(int(x) for x in perm[n_train + n_val :]),
        seed=seed,
        ratios=ratios,  # type: ignore[arg-type]
    )


# --- synthetic benchmark -----------------------------------------------------

DEFAULT_VOCAB = (
    "lemma proof axiom theorem bound "
    "neuron layer weight gradient tensor "
    "gene protein cell enzyme tissue "
    "agent reward policy action state "
    "market price trade asset stock"
).split()


def make_synthetic(
    n_nodes: int,
    n_classes: int,
    homophily: float,
    vocab: Sequence[str] = DEFAULT_VOCAB,
    seed: int = 0,
    *,
    avg_degree: float = 4.0,
    feature_dim: int = 64,
    words_per_text: int = 4,
    class_names: Sequence[str] | None = None,
    soft_token_count: int = 3,
) -> TextGraph:
    """Planted-partition text graph.

    ``vocab`` is cut into ``n_classes`` contiguous chunks. Each node's text is
    ``words_per_text`` words from its class chunk followed by one word drawn
    from the whole vocabulary, so texts are class-indicative but noisy.
    Features are :func:`embed_text` of the text.
    """
    if n_classes < 2 or n_nodes < n_classes:
        raise GraphError("need n_nodes >= n_classes >= 2")
    if not 0.0 <= homophily <= 1.0:
        raise GraphError("homophily must lie in [0, 1]")
    if len(vocab) < n_classes:
        raise GraphError("vocab needs at least one word per class")
    if class_names is None:
        class_names = [f"c{i}" for i in range(n_classes)]
    if len(class_names) != n_classes:
        raise GraphError("class_names length must equal n_classes")
    rng = np.random.default_rng(seed)

    chunks = [list(c) for c in np.array_split(np.array(vocab, dtype=object), n_classes)]
    labels = rng.permutation(np.arange(n_nodes) % n_classes)
    members = [np.flatnonzero(labels == c) for c in range(n_classes)]

    nodes = []
    for i in range(n_nodes):
        own = chunks[labels[i]]
        words = [own[j] for j in rng.integers(0, len(own), size=words_per_text)]
        words.append(vocab[int(rng.integers(0, len(vocab)))])
        text = " ".join(words)
        nodes.append(NodeRecord(i, text, embed_text(text, feature_dim), int(labels[i])))

    target = int(round(avg_degree * n_nodes / 2))
    edges: set[tuple[int, int]] = set()
    attempts = 0
    while len(edges) < target and attempts < 50 * target:
        attempts += 1
        u = int(rng.integers(0, n_nodes))
        c = int(labels[u])
        if rng.random() < homophily:
            pool = members[c]
        else:
            others = [k for k in range(n_classes) if k != c]
            pool = members[others[int(rng.integers(0, len(others)))]]
        w = int(pool[int(rng.integers(0, len(pool)))])
        if w != u:
            edges.add((min(u, w), max(u, w)))

    categories = [
        CategorySpec(
            class_names[c],
            "which is about " + ", ".join(chunks[c][:3]),
            soft_token_count,
        )
        for c in range(n_classes)
    ]
    return TextGraph.build(nodes, edges, categories, feature_dim, name=f"synthetic-{seed}")
