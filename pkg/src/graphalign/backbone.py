"""Frozen causal language model contract and a small decoder-only reference model."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import torch
from torch import Tensor, nn

N_BYTES = 256
PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
GRAPH_ID = 259
SOFT_ID = 260
VOCAB_SIZE = 261
RESERVED_IDS = frozenset({PAD_ID, BOS_ID, EOS_ID, GRAPH_ID, SOFT_ID})

CHECKPOINT_MAGIC = b"GALB"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")


class BackboneError(ValueError):
    pass


class ContextOverflow(BackboneError):
    pass


def tokenize(text: str | bytes) -> list[int]:
    """Byte-level tokenization; never yields a reserved id."""
    data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return list(data)


def detokenize_bytes(ids: Sequence[int]) -> bytes:
    return bytes(i for i in ids if i < N_BYTES)


def detokenize(ids: Sequence[int]) -> str:
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


class Backbone(Protocol):
    vocab_size: int
    d_model: int
    context_length: int

    def embed_tokens(self, ids: Sequence[int] | Tensor) -> Tensor: ...

    def forward_embeddings(self, x: Tensor, lengths: Sequence[int] | None = None) -> Tensor: ...

    def checksum(self) -> str: ...


@dataclass(frozen=True)
class ToyConfig:
    d_model: int = 32
    layers: int = 2
    heads: int = 2
    context_length: int = 1024
    vocab_size: int = VOCAB_SIZE
    d_ff: int = 128
    emb_std: float = 0.1
    pos_std: float = 0.01
    out_std: float = 4.0
    qk_std: float = 1.5
    ff_std: float = 1.0


class ToyTransformer(nn.Module):
    """Pre-LayerNorm decoder-only transformer with learned positions.

    All parameters are created with ``requires_grad=False``; the model is a
    fixed function of its inputs once constructed.
    """

    def __init__(self, config: ToyConfig = ToyConfig(), seed: int = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        if config.d_model % config.heads:
            raise BackboneError("d_model must be divisible by heads")
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        d, f = config.d_model, config.d_ff

        def normal(*shape: int, std: float) -> nn.Parameter:
            w = torch.randn(*shape, generator=gen, dtype=torch.float64) * std
            return nn.Parameter(w.to(dtype), requires_grad=False)

        def const(value: float, *shape: int) -> nn.Parameter:
            return nn.Parameter(torch.full(shape, value, dtype=dtype), requires_grad=False)

        self.tok_emb = normal(config.vocab_size, d, std=config.emb_std)
        self.pos_emb = normal(config.context_length, d, std=config.pos_std)
        self.blocks = nn.ModuleList()
        for _ in range(config.layers):
            blk = nn.Module()
            blk.ln1_g, blk.ln1_b = const(1.0, d), const(0.0, d)
            blk.wq = normal(d, d, std=config.qk_std * d**-0.5)
            blk.wk = normal(d, d, std=config.qk_std * d**-0.5)
            blk.wv = normal(d, d, std=d**-0.5)
            blk.wo = normal(d, d, std=d**-0.5)
            blk.ln2_g, blk.ln2_b = const(1.0, d), const(0.0, d)
            blk.w1, blk.b1 = normal(d, f, std=d**-0.5), const(0.0, f)
            blk.w2, blk.b2 = normal(f, d, std=config.ff_std * f**-0.5), const(0.0, d)
            self.blocks.append(blk)
        self.lnf_g, self.lnf_b = const(1.0, d), const(0.0, d)
        self.w_out = normal(d, config.vocab_size, std=config.out_std * d**-0.5)

    # convenience accessors mirroring the contract
    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def context_length(self) -> int:
        return self.config.context_length

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def ordered_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.named_parameters())

    def embed_tokens(self, ids: Sequence[int] | Tensor) -> Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long).reshape(-1)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise BackboneError("token id out of range")
        return self.tok_emb[ids]

    def forward_embeddings(self, x: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        """Next-token logits for every position of ``x`` (``L×d`` or ``B×L×d``).

        ``lengths`` marks right padding; padded key positions are masked out.
        """
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, length, d = x.shape
        if length > self.context_length:
            raise ContextOverflow(f"sequence length {length} exceeds context {self.context_length}")
        if d != self.d_model:
            raise BackboneError(f"embedding width {d} != d_model {self.d_model}")
        x = x.to(self.dtype) + self.pos_emb[:length]
        mask = torch.ones(length, length, dtype=torch.bool).tril()
        mask = mask.expand(b, 1, length, length)
        if lengths is not None:
            keys = torch.arange(length).unsqueeze(0) < torch.as_tensor(list(lengths)).unsqueeze(1)
            mask = mask & keys[:, None, None, :]
        nh = self.config.heads
        hd = d // nh
        for blk in self.blocks:
            a = _layer_norm(x, blk.ln1_g, blk.ln1_b)
            q = (a @ blk.wq).view(b, length, nh, hd).transpose(1, 2)
            k = (a @ blk.wk).view(b, length, nh, hd).transpose(1, 2)
            v = (a @ blk.wv).view(b, length, nh, hd).transpose(1, 2)
            scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
            scores = scores.masked_fill(~mask, float("-inf"))
            att = torch.softmax(scores, dim=-1)
            out = (att @ v).transpose(1, 2).reshape(b, length, d)
            x = x + out @ blk.wo
            m = _layer_norm(x, blk.ln2_g, blk.ln2_b)
            x = x + torch.nn.functional.gelu(m @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
        logits = _layer_norm(x, self.lnf_g, self.lnf_b) @ self.w_out
        return logits[0] if squeeze else logits

    def forward(self, ids: Sequence[int] | Tensor) -> Tensor:
        return self.forward_embeddings(self.embed_tokens(ids))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for _, p in self.ordered_parameters():
            h.update(p.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def constant(cls, token: int, config: ToyConfig = ToyConfig()) -> "ToyTransformer":
        """A model whose argmax is ``token`` at every position."""
        model = cls(config, seed=0)
        with torch.no_grad():
            model.lnf_g.zero_()
            model.lnf_b.fill_(1.0)
            model.w_out.zero_()
            model.w_out[:, token] = 1.0
        return model


def _layer_norm(x: Tensor, g: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * g + b


@torch.no_grad()
def greedy_generate(backbone: Backbone, prefix: Tensor, max_new: int, stop_at_eos: bool = True) -> list[int]:
    """Append argmax tokens to ``prefix`` embeddings; EOS ends decoding and is not returned."""
    if max_new < 0:
        raise BackboneError("max_new must be >= 0")
    if prefix.shape[0] > backbone.context_length:
        raise ContextOverflow("prefix does not fit the context")
    x = prefix.detach()
    out: list[int] = []
    for _ in range(max_new):
        if x.shape[0] > backbone.context_length:
            raise ContextOverflow("generation ran past the context length")
        t = int(torch.argmax(backbone.forward_embeddings(x)[-1]))
        if stop_at_eos and t == EOS_ID:
            break
        out.append(t)
        x = torch.cat([x, backbone.embed_tokens([t])], dim=0)
    return out


def save_backbone(model: ToyTransformer, path: str | Path) -> None:
    """Header fields, a JSON list of ``[name, shape]`` in blob order, then float64 LE values."""
    c = model.config
    order = [[name, list(p.shape)] for name, p in model.ordered_parameters()]
    spec = json.dumps(order).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, c.d_model, c.layers, c.heads,
                             c.vocab_size, c.context_length, c.d_ff))
        f.write(struct.pack("<I", len(spec)))
        f.write(spec)
        for _, p in model.ordered_parameters():
            f.write(p.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())


def load_backbone(path: str | Path, dtype: torch.dtype = torch.float64) -> ToyTransformer:
    import numpy as np

    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise BackboneError("truncated backbone checkpoint")
    magic, version, d, layers, heads, vocab, ctx, d_ff = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise BackboneError("not a backbone checkpoint")
    if version != CHECKPOINT_VERSION:
        raise BackboneError(f"unsupported backbone checkpoint version {version}")
    off = _HEADER.size
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    order = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    model = ToyTransformer(ToyConfig(d, layers, heads, ctx, vocab, d_ff), seed=0, dtype=dtype)
    params = dict(model.ordered_parameters())
    if [name for name, _ in order] != list(params):
        raise BackboneError("parameter order in checkpoint does not match the model")
    with torch.no_grad():
        for name, shape in order:
            count = int(np.prod(shape)) if shape else 1
            vals = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
            off += 8 * count
            params[name].copy_(torch.from_numpy(vals.copy()).reshape(shape))
    if off != len(raw):
        raise BackboneError("trailing bytes in backbone checkpoint")
    return model
