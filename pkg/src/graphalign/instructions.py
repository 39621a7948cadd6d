"""Instruction example generation for text matching, node classification and link prediction."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from .graph import GraphError, TextGraph, neighbors_within
from .template import NodeSequence, build_tree


class Task(str, Enum):
    TEXT_MATCH = "text_match"
    NODE_CLASS = "node_class"
    LINK_PRED = "link_pred"


class PromptMode(str, Enum):
    NONE = "none"
    MANUAL = "manual"
    SOFT = "soft"


LINK_CATEGORIES = ("connected", "unconnected")


@dataclass(frozen=True)
class Text:
    text: str

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("text segments must be non-empty")


@dataclass(frozen=True)
class GraphBlock:
    seq: NodeSequence


@dataclass(frozen=True)
class SoftPromptBlock:
    category: int
    k: int


Segment = Union[Text, GraphBlock, SoftPromptBlock]


@dataclass(frozen=True)
class InstructionExample:
    segments: tuple[Segment, ...]
    target: str
    task: Task
    stage: int
    center: int | tuple[int, int]
    prompt_mode: PromptMode = PromptMode.NONE
    meta: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self) -> None:
        if not self.target:
            raise ValueError("target must be non-empty")
        n_graph = sum(isinstance(s, GraphBlock) for s in self.segments)
        want = 2 if self.task is Task.LINK_PRED else 1
        if n_graph != want:
            raise ValueError(f"{self.task.value} needs {want} graph block(s), got {n_graph}")

    @property
    def graph_blocks(self) -> list[NodeSequence]:
        return [s.seq for s in self.segments if isinstance(s, GraphBlock)]

    def prompt_text(self, graph_marker: str = "<graph>", soft_marker: str = "<soft>") -> str:
        """Human-readable rendering with markers for non-text segments."""
        parts = []
        for s in self.segments:
            if isinstance(s, Text):
                parts.append(s.text)
            elif isinstance(s, GraphBlock):
                parts.append(graph_marker)
            else:
                parts.append(" ".join([soft_marker] * s.k))
        return "".join(parts)


@dataclass(frozen=True)
class NegativeSet:
    hard: tuple[int, ...]
    easy: tuple[int, ...]

    @property
    def all(self) -> tuple[int, ...]:
        return self.hard + self.easy


@dataclass(frozen=True)
class GenConfig:
    s: int = 10
    h: int = 2
    n_hard: int = 3
    n_easy: int = 7
    entity_noun: str | None = None


class _Builder:
    """Accumulates segments, merging adjacent text."""

    def __init__(self) -> None:
        self.segments: list[Segment] = []

    def text(self, t: str) -> None:
        if not t:
            return
        if self.segments and isinstance(self.segments[-1], Text):
            self.segments[-1] = Text(self.segments[-1].text + t)
        else:
            self.segments.append(Text(t))

    def add(self, seg: Segment) -> None:
        self.segments.append(seg)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


@lru_cache(maxsize=1)
def default_explanations() -> dict:
    with resources.files("graphalign").joinpath("data/explanations.json").open("r", encoding="utf-8") as f:
        return json.load(f)


def _explanation(graph: TextGraph, index: int) -> str:
    cat = graph.categories[index]
    if cat.explanatory_text:
        return cat.explanatory_text
    for table in default_explanations()["node_classification"].values():
        if cat.name in table:
            return table[cat.name]
    raise GraphError(f"category {cat.name!r} has no explanatory text for manual prompts")


def _noun(graph: TextGraph, cfg: GenConfig) -> str:
    return cfg.entity_noun or graph.entity_noun


def _graph_intro(b: _Builder, graph: TextGraph, seq: NodeSequence, cfg: GenConfig) -> None:
    b.text("Given a node-centered graph: ")
    b.add(GraphBlock(seq))
    b.text(
        f", each node represents a {_noun(graph, cfg)}. "
        "The first token represents the central node of the subgraph. "
        "The remaining represent the neighbors. "
    )


# --- negatives ---------------------------------------------------------------

def sample_negatives(
    graph: TextGraph,
    v: int,
    h: int,
    n_hard: int,
    n_easy: int,
    seed: int,
    *,
    exclude_text: str | None = None,
) -> NegativeSet:
    """Mixed hard (within ``h`` hops) and easy (outside ``h`` hops) negatives.

    If the neighbourhood holds fewer than ``n_hard`` candidates the shortfall is
    drawn as extra easy negatives. With ``exclude_text`` set, nodes whose text
    equals it (or is empty) are not eligible.
    """
    if n_hard < 0 or n_easy < 0:
        raise GraphError("negative counts must be >= 0")
    near = neighbors_within(graph, v, h)

    def eligible(u: int) -> bool:
        if exclude_text is None:
            return True
        t = graph.nodes[u].raw_text
        return bool(t) and t != exclude_text

    hard_pool = [u for u in sorted(near) if eligible(u)]
    easy_pool = [u for u in range(graph.n_nodes) if u != v and u not in near and eligible(u)]
    n_h = min(n_hard, len(hard_pool))
    n_e = n_easy + (n_hard - n_h)
    if n_e > len(easy_pool):
        raise GraphError(
            f"node {v}: need {n_h + n_e} negatives but only {n_h + len(easy_pool)} candidates exist"
        )
    rng = _rng(seed, v, 0x6E)
    hard = rng.choice(len(hard_pool), size=n_h, replace=False) if n_h else []
    easy = rng.choice(len(easy_pool), size=n_e, replace=False) if n_e else []
    return NegativeSet(tuple(hard_pool[i] for i in hard), tuple(easy_pool[i] for i in easy))


# --- generators --------------------------------------------------------------

def gen_text_matching(graph: TextGraph, v: int, cfg: GenConfig, seed: int) -> InstructionExample:
    graph._check_node(v)
    positive = graph.nodes[v].raw_text
    if not positive:
        raise GraphError(f"node {v} has no text to match")
    neg = sample_negatives(graph, v, cfg.h, cfg.n_hard, cfg.n_easy, seed, exclude_text=positive)
    texts = [positive] + [graph.nodes[u].raw_text for u in neg.all]
    order = _rng(seed, v, 0x73).permutation(len(texts))
    candidates = [texts[i] for i in order]

    b = _Builder()
    _graph_intro(b, graph, build_tree(graph, v, cfg.s, cfg.h, seed), cfg)
    b.text(f"We need to classify the center node into one of the {len(candidates)} titles: ")
    b.text("".join(f"title: {t}; " for t in candidates))
    b.text("Please tell me which title the center node belongs to?")
    return InstructionExample(
        tuple(b.segments),
        positive,
        Task.TEXT_MATCH,
        1,
        v,
        PromptMode.NONE,
        {"positive_slot": int(np.flatnonzero(order == 0)[0]), "hard": list(neg.hard), "easy": list(neg.easy)},
    )


def _category_list(
    b: _Builder,
    names: Sequence[str],
    mode: PromptMode,
    explain: Sequence[str] | None,
    soft_k: int,
) -> None:
    for i, name in enumerate(names):
        if mode is PromptMode.MANUAL:
            assert explain is not None
            b.text(f"category: {name}, {explain[i]}; ")
        elif mode is PromptMode.SOFT and soft_k > 0:
            b.text(f"category: {name},")
            b.add(SoftPromptBlock(i, soft_k))
            b.text("; ")
        else:
            b.text(f"category: {name}; ")


def gen_node_classification(
    graph: TextGraph, v: int, prompt_mode: PromptMode, cfg: GenConfig, seed: int
) -> InstructionExample:
    graph._check_node(v)
    label = graph.nodes[v].label
    if label is None:
        raise GraphError(f"node {v} is unlabeled")
    prompt_mode = PromptMode(prompt_mode)
    names = [c.name for c in graph.categories]
    explain = [_explanation(graph, i) for i in range(len(names))] if prompt_mode is PromptMode.MANUAL else None
    k = graph.categories[0].soft_token_count if graph.categories else 0

    b = _Builder()
    _graph_intro(b, graph, build_tree(graph, v, cfg.s, cfg.h, seed), cfg)
    b.text(f"We need to classify the center node into {len(names)} classes: ")
    _category_list(b, names, prompt_mode, explain, k)
    b.text("Please tell me which class the center node belongs?")
    return InstructionExample(tuple(b.segments), names[label], Task.NODE_CLASS, 2, v, prompt_mode, {"label": label})


def link_explanations(noun: str) -> tuple[str, str]:
    table = default_explanations()["link_prediction"]
    entry = table.get(noun, table["paper"])
    return entry["connected"], entry["unconnected"]


def gen_link_prediction(
    graph: TextGraph,
    pair: tuple[int, int],
    is_edge: bool,
    prompt_mode: PromptMode,
    cfg: GenConfig,
    seed: int,
    *,
    soft_k: int | None = None,
) -> InstructionExample:
    u, v = pair
    graph._check_node(u)
    graph._check_node(v)
    if u == v:
        raise GraphError("link prediction pair must have distinct endpoints")
    prompt_mode = PromptMode(prompt_mode)
    noun = _noun(graph, cfg)
    if soft_k is None:
        soft_k = graph.categories[0].soft_token_count if graph.categories else 3

    b = _Builder()
    b.text("Given two node-centered graphs: ")
    b.add(GraphBlock(build_tree(graph, u, cfg.s, cfg.h, seed)))
    b.text(" and ")
    b.add(GraphBlock(build_tree(graph, v, cfg.s, cfg.h, seed + 1)))
    b.text(
        f", each node represents a {noun}. "
        "The first token of each graph represents its central node. "
        "The remaining represent the neighbors. "
        "We need to classify the pair of center nodes into 2 classes: "
    )
    explain = link_explanations(noun) if prompt_mode is PromptMode.MANUAL else None
    _category_list(b, LINK_CATEGORIES, prompt_mode, explain, soft_k)
    b.text("Please tell me which class the center node pair belongs?")
    target = LINK_CATEGORIES[0] if is_edge else LINK_CATEGORIES[1]
    return InstructionExample(
        tuple(b.segments), target, Task.LINK_PRED, 2, (u, v), prompt_mode, {"label": 0 if is_edge else 1}
    )


def sample_link_pairs(
    graph: TextGraph, nodes: Iterable[int], n_pairs: int, seed: int
) -> list[tuple[int, int, bool]]:
    """Balanced positive/negative node pairs with both endpoints in ``nodes``.

    Positives are existing edges, negatives uniform non-edges. When fewer
    positives exist than ``n_pairs // 2`` all are used and negatives match.
    """
    pool = sorted(set(int(n) for n in nodes))
    if len(pool) < 2:
        raise GraphError("need at least two nodes to form pairs")
    inside = set(pool)
    positives = sorted(e for e in graph.edges if e[0] in inside and e[1] in inside)
    rng = _rng(seed, 0x6C70)
    n_pos = min(n_pairs // 2, len(positives))
    picked = [positives[i] for i in rng.choice(len(positives), size=n_pos, replace=False)] if n_pos else []
    n_neg = n_pairs - n_pos if n_pos == n_pairs // 2 else n_pos
    max_non_edges = len(pool) * (len(pool) - 1) // 2 - len(positives)
    if n_neg > max_non_edges:
        raise GraphError("not enough non-edges for the requested negatives")
    negatives: set[tuple[int, int]] = set()
    while len(negatives) < n_neg:
        a, c = rng.choice(len(pool), size=2, replace=False)
        e = (min(pool[a], pool[c]), max(pool[a], pool[c]))
        if e not in graph.edges:
            negatives.add(e)
    out = [(u, v, True) for u, v in picked] + [(u, v, False) for u, v in sorted(negatives)]
    return [out[i] for i in rng.permutation(len(out))]


def gen_dataset(
    graph: TextGraph,
    task: Task,
    nodes: Sequence[int],
    cfg: GenConfig,
    prompt_mode: PromptMode = PromptMode.NONE,
    seed: int = 0,
) -> list[InstructionExample]:
    """Generate one example per node (or per sampled pair for link prediction)."""
    task = Task(task)
    nodes = sorted(int(n) for n in nodes)
    if task is Task.TEXT_MATCH:
        return [gen_text_matching(graph, v, cfg, seed) for v in nodes if graph.nodes[v].raw_text]
    if task is Task.NODE_CLASS:
        return [gen_node_classification(graph, v, prompt_mode, cfg, seed) for v in nodes]
    pairs = sample_link_pairs(graph, nodes, len(nodes), seed)
    return [
        gen_link_prediction(graph, (u, v), e, prompt_mode, cfg, seed + 2 * i)
        for i, (u, v, e) in enumerate(pairs)
    ]


# --- JSONL -------------------------------------------------------------------

def _segment_to_json(seg: Segment) -> dict:
    if isinstance(seg, Text):
        return {"t": seg.text}
    if isinstance(seg, GraphBlock):
        return {"g": seg.seq.to_json()}
    return {"sp": {"cat": seg.category, "k": seg.k}}


def _segment_from_json(obj: dict) -> Segment:
    if "t" in obj:
        return Text(obj["t"])
    if "g" in obj:
        return GraphBlock(NodeSequence.from_json(obj["g"]))
    if "sp" in obj:
        return SoftPromptBlock(int(obj["sp"]["cat"]), int(obj["sp"]["k"]))
    raise ValueError(f"unknown segment {obj!r}")


def example_to_json(ex: InstructionExample) -> dict:
    center = list(ex.center) if isinstance(ex.center, tuple) else ex.center
    return {
        "task": ex.task.value,
        "stage": ex.stage,
        "segments": [_segment_to_json(s) for s in ex.segments],
        "target": ex.target,
        "meta": {**ex.meta, "center": center, "prompt_mode": ex.prompt_mode.value},
    }


def example_from_json(obj: dict) -> InstructionExample:
    meta = dict(obj.get("meta", {}))
    center = meta.pop("center")
    mode = PromptMode(meta.pop("prompt_mode", "none"))
    return InstructionExample(
        tuple(_segment_from_json(s) for s in obj["segments"]),
        obj["target"],
        Task(obj["task"]),
        int(obj["stage"]),
        tuple(center) if isinstance(center, list) else int(center),
        mode,
        meta,
    )


def write_dataset(examples: Iterable[InstructionExample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(example_to_json(ex), sort_keys=True, ensure_ascii=False) + "\n")


def read_dataset(path: str | Path) -> list[InstructionExample]:
    out = []
    with Path(path).open("r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(example_from_json(json.loads(line)))
    return out
