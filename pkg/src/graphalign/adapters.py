"""Trainable adapters spliced into the frozen backbone's input embeddings."""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .backbone import BOS_ID, EOS_ID, GRAPH_ID, SOFT_ID, Backbone, ContextOverflow, tokenize
from .graph import TextGraph
from .instructions import GraphBlock, InstructionExample, SoftPromptBlock, Text
from .template import sequence_embeddings

ANSWER_PREFIX = " Answer: "

ADAPTER_MAGIC = b"GALA"
ADAPTER_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")

PROJECTOR = ("proj_w", "proj_b")
SOFT_TABLE = ("soft_table",)
SOFT_ENCODER = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
PARAM_ORDER = PROJECTOR + SOFT_TABLE + SOFT_ENCODER


class AdapterError(ValueError):
    pass


class Tag(IntEnum):
    TEXT = 0
    GRAPH = 1
    SOFT = 2


class AdapterState:
    """Graph projector, per-category soft tokens and a shared two-layer soft-prompt encoder.

    Shapes: ``proj_w`` (d_model, feature_dim), ``proj_b`` (d_model,),
    ``soft_table`` (n_categories, k, d_model), ``enc_w1`` (d_hidden, d_model),
    ``enc_w2`` (d_model, d_hidden) with matching biases.
    """

    def __init__(self, params: dict[str, Tensor]):
        missing = set(PARAM_ORDER) - set(params)
        if missing:
            raise AdapterError(f"missing adapter parameters: {sorted(missing)}")
        self.params = {k: params[k] for k in PARAM_ORDER}
        d_model, feature_dim = self.proj_w.shape
        n_cat, k, d2 = self.soft_table.shape
        d_hidden = self.enc_w1.shape[0]
        expected = {
            "proj_b": (d_model,),
            "soft_table": (n_cat, k, d_model),
            "enc_w1": (d_hidden, d_model),
            "enc_b1": (d_hidden,),
            "enc_w2": (d_model, d_hidden),
            "enc_b2": (d_model,),
        }
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise AdapterError(f"{name} has shape {tuple(self.params[name].shape)}, expected {shape}")

    @classmethod
    def init(
        cls,
        feature_dim: int,
        d_model: int,
        n_categories: int,
        k: int = 3,
        d_hidden: int | None = None,
        seed: int = 0,
        dtype: torch.dtype = torch.float64,
    ) -> "AdapterState":
        d_hidden = d_model if d_hidden is None else d_hidden
        gen = torch.Generator().manual_seed(seed)

        def glorot(fan_out: int, fan_in: int) -> Tensor:
            a = math.sqrt(6.0 / (fan_in + fan_out))
            return (torch.rand(fan_out, fan_in, generator=gen, dtype=torch.float64) * 2 - 1) * a

        params = {
            "proj_w": glorot(d_model, feature_dim),
            "proj_b": torch.zeros(d_model, dtype=torch.float64),
            "soft_table": torch.randn(n_categories, k, d_model, generator=gen, dtype=torch.float64) * 0.02,
            "enc_w1": glorot(d_hidden, d_model),
            "enc_b1": torch.zeros(d_hidden, dtype=torch.float64),
            "enc_w2": glorot(d_model, d_hidden),
            "enc_b2": torch.zeros(d_model, dtype=torch.float64),
        }
        return cls({k_: v.to(dtype) for k_, v in params.items()})

    def __getattr__(self, name: str) -> Tensor:
        params = self.__dict__.get("params")
        if params is not None and name in params:
            return params[name]
        raise AttributeError(name)

    @property
    def feature_dim(self) -> int:
        return self.proj_w.shape[1]

    @property
    def d_model(self) -> int:
        return self.proj_w.shape[0]

    @property
    def n_categories(self) -> int:
        return self.soft_table.shape[0]

    @property
    def k(self) -> int:
        return self.soft_table.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.enc_w1.shape[0]

    def clone(self) -> "AdapterState":
        return AdapterState({k: v.detach().clone() for k, v in self.params.items()})

    def checksum(self, names: tuple[str, ...] = PARAM_ORDER) -> str:
        h = hashlib.sha256()
        for name in names:
            h.update(self.params[name].detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.params.values())


def project(rows: Tensor | np.ndarray, state: AdapterState) -> Tensor:
    rows = torch.as_tensor(rows, dtype=state.proj_w.dtype)
    if rows.dim() != 2 or rows.shape[1] != state.feature_dim:
        raise AdapterError(f"expected n×{state.feature_dim} rows, got {tuple(rows.shape)}")
    return rows @ state.proj_w.T + state.proj_b


def encode_soft_prompts(state: AdapterState, category: int) -> Tensor:
    if not 0 <= category < state.n_categories:
        raise AdapterError(f"category {category} out of range for {state.n_categories} categories")
    table = state.soft_table[category]
    hidden = torch.nn.functional.gelu(table @ state.enc_w1.T + state.enc_b1)
    return hidden @ state.enc_w2.T + state.enc_b2


@dataclass
class AssembledInput:
    embeddings: Tensor
    tokens: Tensor
    target_mask: Tensor
    provenance: np.ndarray
    prefix_length: int

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def _layout(example: InstructionExample) -> tuple[list[int], list[int], list[tuple[int, object]]]:
    """Token ids, provenance tags and ``(start, segment)`` for placeholder runs."""
    ids: list[int] = []
    tags: list[int] = []
    blocks: list[tuple[int, object]] = []
    for seg in example.segments:
        if isinstance(seg, Text):
            t = tokenize(seg.text)
            ids += t
            tags += [Tag.TEXT] * len(t)
        elif isinstance(seg, GraphBlock):
            blocks.append((len(ids), seg))
            ids += [GRAPH_ID] * len(seg.seq)
            tags += [Tag.GRAPH] * len(seg.seq)
        elif isinstance(seg, SoftPromptBlock):
            blocks.append((len(ids), seg))
            ids += [SOFT_ID] * seg.k
            tags += [Tag.SOFT] * seg.k
        else:
            raise AdapterError(f"unknown segment {seg!r}")
    return ids, tags, blocks


def assemble_input(
    example: InstructionExample,
    graph: TextGraph,
    backbone: Backbone,
    state: AdapterState,
    include_target: bool = True,
) -> AssembledInput:
    """Token stream with graph and soft-prompt placeholders replaced by adapter outputs.

    Layout: prompt segments, ``" Answer: "``, BOS, target bytes, EOS. The target
    mask covers the target bytes and EOS. With ``include_target=False`` the
    sequence stops after BOS, ready for decoding.
    """
    ids, tags, blocks = _layout(example)
    ids += tokenize(ANSWER_PREFIX) + [BOS_ID]
    tags += [Tag.TEXT] * (len(ANSWER_PREFIX.encode()) + 1)
    prefix_length = len(ids)
    if include_target:
        tgt = tokenize(example.target) + [EOS_ID]
        ids += tgt
        tags += [Tag.TEXT] * len(tgt)
    if len(ids) > backbone.context_length:
        raise ContextOverflow(f"assembled input of length {len(ids)} exceeds context {backbone.context_length}")

    emb = backbone.embed_tokens(ids).to(state.proj_w.dtype)
    if blocks:
        emb = emb.clone()
        for start, seg in blocks:
            if isinstance(seg, GraphBlock):
                if state.feature_dim != graph.feature_dim:
                    raise AdapterError("projector feature_dim does not match the graph")
                rows = project(sequence_embeddings(graph, seg.seq), state)
            else:
                if seg.k != state.k:
                    raise AdapterError(f"soft block has {seg.k} slots, adapter has {state.k}")
                rows = encode_soft_prompts(state, seg.category)
            emb[start : start + rows.shape[0]] = rows
    id_t = torch.tensor(ids, dtype=torch.long)
    placeholders = int(((id_t == GRAPH_ID) | (id_t == SOFT_ID)).sum())
    expected = sum(len(s.seq) if isinstance(s, GraphBlock) else s.k for _, s in blocks)
    if placeholders != expected:
        raise AdapterError("placeholder count does not match the segments")
    mask = torch.zeros(len(ids), dtype=torch.bool)
    mask[prefix_length:] = True
    return AssembledInput(emb, id_t, mask, np.asarray(tags, dtype=np.int8), prefix_length)


def save_adapter(state: AdapterState, path: str | Path) -> None:
    """Header (magic, version, feature_dim, d_model, n_categories, k, d_hidden) then
    float64 LE blobs for proj_w, proj_b, soft_table, enc_w1, enc_b1, enc_w2, enc_b2."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(ADAPTER_MAGIC, ADAPTER_VERSION, state.feature_dim, state.d_model,
                             state.n_categories, state.k, state.d_hidden))
        for name in PARAM_ORDER:
            f.write(state.params[name].detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())


def load_adapter(path: str | Path) -> AdapterState:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise AdapterError("truncated adapter checkpoint")
    magic, version, fdim, d, n_cat, k, dh = _HEADER.unpack_from(raw, 0)
    if magic != ADAPTER_MAGIC:
        raise AdapterError("not an adapter checkpoint")
    if version != ADAPTER_VERSION:
        raise AdapterError(f"unsupported adapter checkpoint version {version}")
    shapes = {
        "proj_w": (d, fdim), "proj_b": (d,), "soft_table": (n_cat, k, d),
        "enc_w1": (dh, d), "enc_b1": (dh,), "enc_w2": (d, dh), "enc_b2": (d,),
    }
    off = _HEADER.size
    params = {}
    for name in PARAM_ORDER:
        count = int(np.prod(shapes[name]))
        vals = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        params[name] = torch.from_numpy(vals.copy()).reshape(shapes[name])
    if off != len(raw):
        raise AdapterError("trailing bytes in adapter checkpoint")
    return AdapterState(params)
