"""End-to-end drivers for the four evaluation protocols.

Every graph handed to a training or evaluation call goes through an
:class:`AccessLog`, so callers can check afterwards which nodes each phase saw.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapters import AdapterState
from .backbone import Backbone
from .evaluation import EvalMode, EvalReport, evaluate
from .graph import GraphError, TextGraph, split
from .instructions import PromptMode, Task, gen_dataset
from .trainer import TrainReport, TuneConfig, _fit, fresh_state, train_stage1, train_stage2, trainable_names


@dataclass(frozen=True)
class Access:
    op: str
    dataset: str
    nodes: frozenset[int]


@dataclass
class AccessLog:
    events: list[Access] = field(default_factory=list)

    def record(self, op: str, graph: TextGraph, nodes: Sequence[int]) -> None:
        self.events.append(Access(op, graph.name, frozenset(int(v) for v in nodes)))

    def datasets(self, prefix: str) -> set[str]:
        """Names of graphs touched by operations whose name starts with ``prefix``."""
        return {e.dataset for e in self.events if e.op.startswith(prefix)}

    def nodes(self, op_prefix: str, dataset: str) -> frozenset[int]:
        out: set[int] = set()
        for e in self.events:
            if e.op.startswith(op_prefix) and e.dataset == dataset:
                out |= e.nodes
        return frozenset(out)


@dataclass
class PipelineResult:
    state: AdapterState
    report: EvalReport
    train_reports: dict[str, TrainReport]
    log: AccessLog


def _eval_nodes(graph: TextGraph, cfg: TuneConfig, which: str = "test") -> list[int]:
    sp = split(graph, cfg.ratios, cfg.seed)
    return sorted({"train": sp.train, "val": sp.val, "test": sp.test}[which])


def two_stage(
    graph: TextGraph,
    backbone: Backbone,
    stage1: TuneConfig | None,
    stage2: TuneConfig | None,
    log: AccessLog | None = None,
) -> tuple[AdapterState, dict[str, TrainReport]]:
    """Text matching over all nodes, then task tuning on the training split.

    Either stage may be skipped by passing ``None``.
    """
    log = log if log is not None else AccessLog()
    reports: dict[str, TrainReport] = {}
    state = None
    if stage1 is not None:
        nodes = list(range(graph.n_nodes))
        log.record("train:stage1", graph, nodes)
        state, reports["stage1"] = train_stage1(graph, backbone, stage1, nodes=nodes)
    if stage2 is not None:
        nodes = _eval_nodes(graph, stage2, "train")
        log.record("train:stage2", graph, nodes)
        state, reports["stage2"] = train_stage2(graph, backbone, state, stage2, nodes=nodes)
    if state is None:
        raise GraphError("at least one stage must run")
    return state, reports


def run_supervised(graph: TextGraph, backbone: Backbone, stage1: TuneConfig | None, stage2: TuneConfig,
                   log: AccessLog | None = None) -> PipelineResult:
    log = log if log is not None else AccessLog()
    state, reports = two_stage(graph, backbone, stage1, stage2, log)
    nodes = _eval_nodes(graph, stage2)
    log.record("eval", graph, nodes)
    report = evaluate(graph, backbone, state, nodes, stage2.task, stage2.prompt_mode,
                      EvalMode.SUPERVISED, stage2.gen, stage2.seed)
    return PipelineResult(state, report, reports, log)


def run_zero_shot_self(graph: TextGraph, backbone: Backbone, stage1: TuneConfig,
                       log: AccessLog | None = None) -> PipelineResult:
    """Stage 1 only, then node classification with manual category prompts."""
    log = log if log is not None else AccessLog()
    state, reports = two_stage(graph, backbone, stage1, None, log)
    nodes = _eval_nodes(graph, stage1)
    log.record("eval", graph, nodes)
    report = evaluate(graph, backbone, state, nodes, Task.NODE_CLASS, PromptMode.MANUAL,
                      EvalMode.ZERO_SHOT_SELF, stage1.gen, stage1.seed)
    return PipelineResult(state, report, reports, log)


def run_cross_dataset(source: TextGraph, target: TextGraph, backbone: Backbone, stage1: TuneConfig | None,
                      stage2: TuneConfig, log: AccessLog | None = None) -> PipelineResult:
    """Tune on ``source`` only and evaluate on the test split of ``target``."""
    if source.feature_dim != target.feature_dim:
        raise GraphError(
            f"cross-dataset transfer needs equal feature_dim, got {source.feature_dim} and {target.feature_dim}"
        )
    if source is target:
        raise GraphError("source and target must be different graphs")
    log = log if log is not None else AccessLog()
    state, reports = two_stage(source, backbone, stage1, stage2, log)
    if target.name in log.datasets("train"):
        raise GraphError(f"target graph {target.name!r} was used for training")
    nodes = _eval_nodes(target, stage2)
    log.record("eval", target, nodes)
    report = evaluate(target, backbone, state, nodes, stage2.task, PromptMode.MANUAL,
                      EvalMode.CROSS_DATASET, stage2.gen, stage2.seed)
    return PipelineResult(state, report, reports, log)


def run_multi_dataset(graphs: Sequence[TextGraph], backbone: Backbone, stage1: TuneConfig | None,
                      stage2: TuneConfig, log: AccessLog | None = None) -> PipelineResult:
    """One adapter tuned on the union of all training splits, evaluated per graph.

    Stage 1 runs over the concatenated text-matching sets. Category soft
    prompts are per graph, so only manual and none prompts are supported.
    The combined report stacks the per-graph confusion matrices block-diagonally.
    """
    if stage2.prompt_mode is PromptMode.SOFT:
        raise GraphError("multi-dataset tuning supports manual and none prompts only")
    if len({g.name for g in graphs}) != len(graphs) or len({g.feature_dim for g in graphs}) != 1:
        raise GraphError("graphs need distinct names and a common feature_dim")
    log = log if log is not None else AccessLog()
    reports: dict[str, TrainReport] = {}
    state = fresh_state(graphs[0], backbone, stage2)
    if stage1 is not None:
        ex1, g1 = [], []
        for g in graphs:
            nodes = list(range(g.n_nodes))
            log.record("train:stage1", g, nodes)
            ds = gen_dataset(g, Task.TEXT_MATCH, nodes, stage1.gen, seed=stage1.seed)
            ex1 += ds
            g1 += [g] * len(ds)
        state, reports["stage1"] = _fit(ex1, g1, backbone, state, trainable_names(1, PromptMode.MANUAL),
                                        stage1, stage1.seed)
    ex2, g2 = [], []
    for g in graphs:
        nodes = _eval_nodes(g, stage2, "train")
        log.record("train:stage2", g, nodes)
        ds = gen_dataset(g, stage2.task, nodes, stage2.gen, stage2.prompt_mode, seed=stage2.seed)
        ex2 += ds
        g2 += [g] * len(ds)
    s2 = state if stage1 is not None and not stage2.cold_start else fresh_state(graphs[0], backbone, stage2)
    state, reports["stage2"] = _fit(ex2, g2, backbone, s2, trainable_names(2, stage2.prompt_mode),
                                    stage2, stage2.seed + 1)

    per: dict[str, EvalReport] = {}
    for g in graphs:
        nodes = _eval_nodes(g, stage2)
        log.record("eval", g, nodes)
        per[g.name] = evaluate(g, backbone, state, nodes, stage2.task, stage2.prompt_mode,
                               EvalMode.MULTI_DATASET, stage2.gen, stage2.seed)
    report = combine_reports(per)
    return PipelineResult(state, report, reports, log)


def combine_reports(per: dict[str, EvalReport]) -> EvalReport:
    names: list[str] = []
    for ds, r in per.items():
        names += [f"{ds}:{c}" for c in r.categories]
    n = len(names)
    conf = np.zeros((n, n + 1), dtype=np.int64)
    off = 0
    for r in per.values():
        c = np.asarray(r.confusion)
        m = len(r.categories)
        conf[off : off + m, off : off + m] = c[:, :m]
        if c.shape[1] > m:
            conf[off : off + m, n] = c[:, m]
        off += m
    first = next(iter(per.values()))
    return EvalReport.from_confusion(
        conf, names, mode=EvalMode.MULTI_DATASET.value, task=first.task, prompt_mode=first.prompt_mode,
        dataset="+".join(per), seed=first.seed,
        per_dataset={ds: {"accuracy": r.accuracy, "macro_f1": r.macro_f1, "n_examples": r.n_examples}
                     for ds, r in per.items()},
    )
