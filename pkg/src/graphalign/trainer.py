"""Masked autoregressive loss, adapter-only gradients, two-stage tuning and gradient checks."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .adapters import (
    PROJECTOR,
    SOFT_ENCODER,
    SOFT_TABLE,
    AdapterState,
    AssembledInput,
    assemble_input,
)
from .backbone import Backbone
from .graph import GraphError, TextGraph, split
from .instructions import (
    GenConfig,
    GraphBlock,
    InstructionExample,
    PromptMode,
    SoftPromptBlock,
    Task,
    Text,
    gen_dataset,
)
from .template import build_tree

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TuneConfig:
    learning_rate: float = 2e-3
    batch_size: int = 2
    warm_ratio: float = 3e-2
    epochs: int = 3
    max_len: int = 1024
    s: int = 10
    h: int = 2
    n_hard: int = 3
    n_easy: int = 7
    k: int = 3
    seed: int = 0
    prompt_mode: PromptMode = PromptMode.MANUAL
    task: Task = Task.NODE_CLASS
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    loss_reduction: str = "mean"
    cold_start: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt_mode", PromptMode(self.prompt_mode))
        object.__setattr__(self, "task", Task(self.task))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs >= 0")
        if not 0.0 <= self.warm_ratio < 1.0:
            raise ValueError("warm_ratio must lie in [0, 1)")
        if self.s < 1 or self.h < 1 or self.n_hard < 0 or self.n_easy < 0 or self.k < 0 or self.max_len < 1:
            raise ValueError("s, h, max_len must be positive and counts non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValueError("loss_reduction must be 'mean' or 'sum'")

    @property
    def gen(self) -> GenConfig:
        return GenConfig(self.s, self.h, self.n_hard, self.n_easy)

    @classmethod
    def from_mapping(cls, values: dict) -> "TuneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prompt_mode"] = self.prompt_mode.value
        d["task"] = self.task.value
        return d


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    state_checksum: str = ""
    backbone_checksum: str = ""
    wall_clock: float = 0.0
    seed: int = 0

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "lr"])
            for i, (l, r) in enumerate(zip(self.losses, self.lrs)):
                w.writerow([i, repr(l), repr(r)])


# --- loss ---------------------------------------------------------------------

def loss(logits: Tensor, assembled: AssembledInput, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of the masked target tokens.

    Position ``i`` is scored with the logits emitted at ``i - 1``.
    """
    mask = assembled.target_mask
    if logits.shape[0] != mask.shape[0]:
        raise TrainingError("logits and assembled input lengths differ")
    positions = torch.nonzero(mask).flatten()
    if positions.numel() == 0:
        raise TrainingError("no target positions to score")
    if int(positions[0]) == 0:
        raise TrainingError("the first position cannot be a target")
    logp = torch.log_softmax(logits[positions - 1], dim=-1)
    nll = -logp.gather(1, assembled.tokens[positions].unsqueeze(1)).squeeze(1)
    return nll.sum() if reduction == "sum" else nll.mean()


def batch_loss(
    examples: Sequence[InstructionExample],
    graph: TextGraph | Sequence[TextGraph],
    backbone: Backbone,
    state: AdapterState,
    reduction: str = "mean",
) -> Tensor:
    """Mean over the batch of per-example losses, using one right-padded forward pass.

    ``graph`` is either shared by the batch or given per example.
    """
    graphs = _per_example(graph, len(examples))
    items = [assemble_input(ex, g, backbone, state) for ex, g in zip(examples, graphs)]
    lengths = [len(a) for a in items]
    width = max(lengths)
    x = torch.stack(
        [torch.cat([a.embeddings, a.embeddings.new_zeros(width - len(a), backbone.d_model)]) for a in items]
    )
    logits = backbone.forward_embeddings(x, lengths)
    per = [loss(logits[i, : lengths[i]], a, reduction) for i, a in enumerate(items)]
    return torch.stack(per).mean()


def _per_example(graph: TextGraph | Sequence[TextGraph], n: int) -> Sequence[TextGraph]:
    if isinstance(graph, TextGraph):
        return [graph] * n
    if len(graph) != n:
        raise TrainingError("need one graph per example")
    return graph


# --- gradients ----------------------------------------------------------------

def trainable_names(stage: int, prompt_mode: PromptMode) -> tuple[str, ...]:
    if stage == 2 and PromptMode(prompt_mode) is PromptMode.SOFT:
        return PROJECTOR + SOFT_TABLE + SOFT_ENCODER
    return PROJECTOR


def backward(
    examples: Sequence[InstructionExample],
    graph: TextGraph,
    backbone: Backbone,
    state: AdapterState,
    names: Iterable[str] = PROJECTOR + SOFT_TABLE + SOFT_ENCODER,
    reduction: str = "mean",
) -> tuple[float, dict[str, Tensor]]:
    """Batch-mean loss and its exact gradient with respect to the named adapter blocks."""
    names = tuple(names)
    leaves = {n: state.params[n].detach().clone().requires_grad_(True) for n in names}
    work = AdapterState({**{k: v.detach() for k, v in state.params.items()}, **leaves})
    value = batch_loss(examples, graph, backbone, work, reduction)
    if not torch.isfinite(value):
        raise TrainingError(f"non-finite loss {float(value)}")
    grads = torch.autograd.grad(value, [leaves[n] for n in names], allow_unused=True)
    out = {
        n: (g if g is not None else torch.zeros_like(leaves[n])).detach() for n, g in zip(names, grads)
    }
    return float(value.detach()), out


def central_difference(f: Callable[[np.ndarray], float], w: np.ndarray, idx: Iterable[int], step: float) -> dict[int, float]:
    """Central-difference partials of ``f`` at ``w`` for the flat indices ``idx``."""
    out = {}
    for i in idx:
        a = w.copy()
        a[i] += step
        b = w.copy()
        b[i] -= step
        out[i] = (f(a) - f(b)) / (2 * step)
    return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    example: InstructionExample | Sequence[InstructionExample],
    graph: TextGraph,
    backbone: Backbone,
    state: AdapterState,
    step: float = 1e-5,
    n_samples: int = 8,
    seed: int = 0,
    names: Iterable[str] = PROJECTOR + SOFT_TABLE + SOFT_ENCODER,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Max relative error between autograd and central differences per parameter block.

    ``n_samples`` coordinates are drawn per block. The floor in the
    denominator keeps coordinates with vanishing gradients from dominating.
    """
    if state.proj_w.dtype != torch.float64 or backbone.tok_emb.dtype != torch.float64:
        raise TrainingError("gradient checks require float64 parameters")
    batch = [example] if isinstance(example, InstructionExample) else list(example)
    names = tuple(names)
    _, grads = backward(batch, graph, backbone, state, names)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name in names:
        base = state.params[name].detach().numpy().astype(np.float64).ravel()
        shape = state.params[name].shape

        def f(flat: np.ndarray, name: str = name, shape=shape) -> float:
            trial = AdapterState({**state.params, name: torch.from_numpy(flat.reshape(shape))})
            with torch.no_grad():
                return float(batch_loss(batch, graph, backbone, trial))

        idx = rng.choice(base.size, size=min(n_samples, base.size), replace=False)
        fd = central_difference(f, base, idx, step)
        g = grads[name].numpy().ravel()
        errors[name] = max(relative_error(float(g[i]), fd[i], floor) for i in idx)
    errors["max"] = max(errors.values())
    return errors


def probe_example(graph: TextGraph, v: int, k: int = 3, s: int = 2, h: int = 2, seed: int = 0) -> InstructionExample:
    """Short soft-prompted classification example that exercises every adapter block."""
    label = graph.nodes[v].label or 0
    segs: list = [Text("graph: "), GraphBlock(build_tree(graph, v, s, h, seed)), Text(" classes:")]
    for i, c in enumerate(graph.categories):
        segs.append(Text(f" {c.name},"))
        if k:
            segs.append(SoftPromptBlock(i, k))
        segs.append(Text(";"))
    segs.append(Text(" which?"))
    merged: list = []
    for seg in segs:
        if merged and isinstance(seg, Text) and isinstance(merged[-1], Text):
            merged[-1] = Text(merged[-1].text + seg.text)
        else:
            merged.append(seg)
    return InstructionExample(
        tuple(merged), graph.categories[label].name, Task.NODE_CLASS, 2, v, PromptMode.SOFT, {"label": label}
    )


# --- optimisation ---------------------------------------------------------------

def lr_multiplier(step: int, total: int, warm_ratio: float) -> float:
    """Linear warm-up over ``ceil(warm_ratio * total)`` steps, then linear decay to zero."""
    warm = math.ceil(warm_ratio * total)
    if step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


def _fit(
    examples: Sequence[InstructionExample],
    graph: TextGraph | Sequence[TextGraph],
    backbone: Backbone,
    state: AdapterState,
    names: tuple[str, ...],
    cfg: TuneConfig,
    seed: int,
) -> tuple[AdapterState, TrainReport]:
    t0 = time.perf_counter()
    before = backbone.checksum()
    state = state.clone()
    report = TrainReport(seed=seed, backbone_checksum=before)
    n = len(examples)
    graphs = _per_example(graph, n)
    if cfg.epochs == 0 or n == 0:
        report.state_checksum = state.checksum()
        return state, report
    for name in names:
        state.params[name].requires_grad_(True)
    params = [state.params[k] for k in names]
    if cfg.weight_decay:
        # decoupled decay; with weight_decay 0 plain Adam is used
        opt = torch.optim.AdamW(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps,
                                weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_multiplier(s, total, cfg.warm_ratio))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7472]))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            opt.zero_grad(set_to_none=True)
            value = batch_loss([examples[i] for i in idx], [graphs[i] for i in idx], backbone, state,
                               cfg.loss_reduction)
            if not torch.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {b}")
            value.backward()
            report.lrs.append(opt.param_groups[0]["lr"])
            opt.step()
            sched.step()
            report.losses.append(float(value.detach()))
            epoch_losses.append(float(value.detach()))
        report.epoch_means.append(float(np.mean(epoch_losses)))
        log.info("epoch %d mean loss %.4f", epoch, report.epoch_means[-1])
    for name in names:
        state.params[name].requires_grad_(False)
    state = state.clone()
    if backbone.checksum() != before:
        raise TrainingError("backbone parameters changed during adapter training")
    report.state_checksum = state.checksum()
    report.wall_clock = time.perf_counter() - t0
    return state, report


def fresh_state(graph: TextGraph, backbone: Backbone, cfg: TuneConfig, n_categories: int | None = None) -> AdapterState:
    if n_categories is None:
        n_categories = 2 if cfg.task is Task.LINK_PRED else len(graph.categories)
    return AdapterState.init(graph.feature_dim, backbone.d_model, n_categories, cfg.k, seed=cfg.seed)


def train_stage1(
    graph: TextGraph,
    backbone: Backbone,
    cfg: TuneConfig,
    state: AdapterState | None = None,
    nodes: Sequence[int] | None = None,
    examples: Sequence[InstructionExample] | None = None,
) -> tuple[AdapterState, TrainReport]:
    """Text-matching tuning of the projector only."""
    if state is None:
        state = fresh_state(graph, backbone, cfg)
    if examples is None:
        nodes = range(graph.n_nodes) if nodes is None else nodes
        examples = gen_dataset(graph, Task.TEXT_MATCH, list(nodes), cfg.gen, seed=cfg.seed)
    if any(ex.task is not Task.TEXT_MATCH for ex in examples):
        raise TrainingError("stage 1 trains on text matching examples only")
    return _fit(examples, graph, backbone, state, PROJECTOR, cfg, cfg.seed)


def train_stage2(
    graph: TextGraph,
    backbone: Backbone,
    state_in: AdapterState | None,
    cfg: TuneConfig,
    nodes: Sequence[int] | None = None,
    examples: Sequence[InstructionExample] | None = None,
) -> tuple[AdapterState, TrainReport]:
    """Task tuning: projector only for manual/none prompts, plus soft blocks for soft prompts.

    ``nodes`` defaults to the training split under ``cfg.ratios``. A missing
    ``state_in`` or ``cfg.cold_start`` starts from a fresh initialisation.
    """
    if nodes is None and examples is None:
        nodes = sorted(split(graph, cfg.ratios, cfg.seed).train)
    if examples is None:
        examples = gen_dataset(graph, cfg.task, list(nodes), cfg.gen, cfg.prompt_mode, seed=cfg.seed)
    fresh = fresh_state(graph, backbone, cfg)
    if state_in is None or cfg.cold_start:
        state = fresh
    else:
        state = state_in
        if state.n_categories != fresh.n_categories or state.k != fresh.k:
            # stage-1 checkpoints carry a placeholder soft table; keep the projector
            state = AdapterState({**fresh.params, "proj_w": state_in.proj_w, "proj_b": state_in.proj_b})
    names = trainable_names(2, cfg.prompt_mode)
    return _fit(examples, graph, backbone, state, names, cfg, cfg.seed + 1)
