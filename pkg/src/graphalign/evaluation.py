"""Answer parsing, accuracy / macro-F1 and evaluation drivers."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .adapters import AdapterState, assemble_input
from .backbone import Backbone, detokenize, greedy_generate, tokenize
from .graph import GraphError, TextGraph
from .instructions import (
    LINK_CATEGORIES,
    GenConfig,
    InstructionExample,
    PromptMode,
    Task,
    gen_dataset,
)


class EvalMode(str, Enum):
    SUPERVISED = "supervised"
    ZERO_SHOT_SELF = "zero_shot_self"
    CROSS_DATASET = "cross_dataset"
    MULTI_DATASET = "multi_dataset"


def parse_answer(generated: str, categories: Sequence[str]) -> int | None:
    """Index of the category named earliest in ``generated``; ``None`` if none occurs.

    Matching is case-insensitive. Longer names are tried first, and a shorter
    name is ignored where it only occurs inside an already matched longer one.
    """
    if not categories:
        raise ValueError("categories must be non-empty")
    text = generated.lower()
    claimed = np.zeros(len(text) + 1, dtype=bool)
    best: tuple[int, int] | None = None
    for i in sorted(range(len(categories)), key=lambda i: (-len(categories[i]), i)):
        name = categories[i].lower()
        if not name:
            continue
        pos = text.find(name)
        while pos != -1 and claimed[pos : pos + len(name)].all():
            pos = text.find(name, pos + 1)
        if pos == -1:
            continue
        claimed[pos : pos + len(name)] = True
        if best is None or pos < best[0]:
            best = (pos, i)
    return None if best is None else best[1]


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class F1.

    ``confusion[i, j]`` counts true class ``i`` predicted as ``j``. An optional
    extra last column holds unparsed predictions: they lower recall of the
    true class and add no false positives.
    """
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("confusion must be a non-empty matrix")
    n = c.shape[0]
    if c.shape[1] not in (n, n + 1):
        raise ValueError("confusion must be n×n or n×(n+1)")
    if (c < 0).any():
        raise ValueError("confusion counts must be non-negative")
    tp = np.diag(c[:, :n])
    pred = c[:, :n].sum(axis=0)
    true = c.sum(axis=1)
    f1 = np.zeros(n)
    for i in range(n):
        p = tp[i] / pred[i] if pred[i] else 0.0
        r = tp[i] / true[i] if true[i] else 0.0
        f1[i] = 2 * p * r / (p + r) if p + r else 0.0
    return float(f1.mean())


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    confusion: list[list[int]]
    categories: list[str]
    mode: str
    task: str
    prompt_mode: str
    n_examples: int
    unparsed: int
    dataset: str = ""
    seed: int = 0
    per_dataset: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, confusion: np.ndarray, categories: Sequence[str], **kw) -> "EvalReport":
        confusion = np.asarray(confusion, dtype=np.int64)
        n = int(confusion.sum())
        return cls(
            accuracy=float(np.trace(confusion[:, : len(categories)]) / n) if n else 0.0,
            macro_f1=macro_f1(confusion) if n else 0.0,
            confusion=confusion.tolist(),
            categories=list(categories),
            n_examples=n,
            unparsed=int(confusion[:, -1].sum()) if confusion.shape[1] > len(categories) else 0,
            **kw,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


Decoder = Callable[[InstructionExample, TextGraph], str]


def greedy_decoder(backbone: Backbone, state: AdapterState, max_new: int) -> Decoder:
    def decode(ex: InstructionExample, graph: TextGraph) -> str:
        with torch.no_grad():
            prefix = assemble_input(ex, graph, backbone, state, include_target=False).embeddings
            return detokenize(greedy_generate(backbone, prefix, max_new))

    return decode


def score(
    examples: Sequence[InstructionExample],
    graph: TextGraph,
    categories: Sequence[str],
    decode: Decoder,
) -> np.ndarray:
    """Confusion matrix with a trailing unparsed column."""
    n = len(categories)
    conf = np.zeros((n, n + 1), dtype=np.int64)
    index = {c: i for i, c in enumerate(categories)}
    for ex in examples:
        pred = parse_answer(decode(ex, graph), categories)
        conf[index[ex.target], n if pred is None else pred] += 1
    return conf


def evaluate(
    graph: TextGraph,
    backbone: Backbone,
    state: AdapterState,
    nodes: Sequence[int],
    task: Task = Task.NODE_CLASS,
    prompt_mode: PromptMode = PromptMode.MANUAL,
    mode: EvalMode = EvalMode.SUPERVISED,
    cfg: GenConfig = GenConfig(),
    seed: int = 0,
    decoder: Decoder | None = None,
) -> EvalReport:
    """Generate instructions for ``nodes``, decode greedily and tally predictions.

    Zero-shot and cross-dataset modes always use manual category prompts.
    """
    task, mode = Task(task), EvalMode(mode)
    prompt_mode = PromptMode(prompt_mode)
    if not nodes:
        raise GraphError("evaluation split is empty")
    if mode in (EvalMode.ZERO_SHOT_SELF, EvalMode.CROSS_DATASET):
        prompt_mode = PromptMode.MANUAL
    if state.feature_dim != graph.feature_dim:
        raise GraphError(
            f"adapter feature_dim {state.feature_dim} does not match graph feature_dim {graph.feature_dim}"
        )
    categories = list(LINK_CATEGORIES) if task is Task.LINK_PRED else [c.name for c in graph.categories]
    examples = gen_dataset(graph, task, list(nodes), cfg, prompt_mode, seed)
    if decoder is None:
        max_new = max(len(tokenize(c)) for c in categories) + 2
        decoder = greedy_decoder(backbone, state, max_new)
    conf = score(examples, graph, categories, decoder)
    return EvalReport.from_confusion(
        conf, categories, mode=mode.value, task=task.value, prompt_mode=prompt_mode.value,
        dataset=graph.name, seed=seed,
    )
