from __future__ import annotations

import struct

import numpy as np
import pytest
import torch

from graphalign.adapters import (
    ANSWER_PREFIX,
    PARAM_ORDER,
    AdapterError,
    AdapterState,
    Tag,
    assemble_input,
    encode_soft_prompts,
    load_adapter,
    project,
    save_adapter,
)
from graphalign.backbone import BOS_ID, EOS_ID, GRAPH_ID, SOFT_ID, ContextOverflow, ToyConfig, ToyTransformer, tokenize
from graphalign.graph import CategorySpec, make_synthetic
from graphalign.instructions import (
    GenConfig,
    InstructionExample,
    PromptMode,
    Task,
    Text,
    gen_link_prediction,
    gen_node_classification,
    gen_text_matching,
)

from conftest import small_graph


def state_with(**overrides) -> AdapterState:
    base = AdapterState.init(2, 2, 1, k=1, seed=0)
    return AdapterState({**base.params, **{k: torch.as_tensor(v, dtype=torch.float64) for k, v in overrides.items()}})


@pytest.fixture(scope="module")
def toy():
    return ToyTransformer(seed=0)


@pytest.fixture(scope="module")
def graph():
    return make_synthetic(40, 3, 0.9, seed=0)


# --- project ------------------------------------------------------------------

def test_project_matrix_oracle():
    s = state_with(proj_w=[[1.0, 2.0], [3.0, 4.0]], proj_b=[1.0, 1.0])
    np.testing.assert_array_equal(project(np.array([[1.0, 1.0]]), s).numpy(), [[4.0, 8.0]])


def test_project_identity_and_zero_rows():
    s = state_with(proj_w=np.eye(2), proj_b=np.zeros(2))
    x = np.array([[0.5, -2.0], [0.0, 0.0]])
    np.testing.assert_array_equal(project(x, s).numpy(), x)


def test_project_affine_property():
    s = AdapterState.init(6, 4, 2, seed=3)
    s = AdapterState({**s.params, "proj_b": torch.randn(4, dtype=torch.float64)})
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    a, b = 0.7, -1.3
    lhs = project(a * x + b * y, s)
    rhs = a * project(x, s) + b * project(y, s) - (a + b - 1) * s.proj_b
    torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-12)


def test_project_dimension_mismatch():
    with pytest.raises(AdapterError):
        project(np.zeros((1, 3)), AdapterState.init(2, 2, 1))


# --- soft prompt encoder ------------------------------------------------------

def test_encoder_identity_composition():
    d = 4
    base = AdapterState.init(2, d, 2, k=3, seed=1)
    # GELU(z) = z for large positive z, so shifting by +100 then back inverts the first layer
    ident = AdapterState({**base.params, "enc_w1": torch.eye(d, dtype=torch.float64),
                          "enc_b1": torch.full((d,), 100.0, dtype=torch.float64),
                          "enc_w2": torch.eye(d, dtype=torch.float64),
                          "enc_b2": torch.full((d,), -100.0, dtype=torch.float64)})
    for c in range(2):
        torch.testing.assert_close(encode_soft_prompts(ident, c), ident.soft_table[c], rtol=0, atol=1e-12)


def test_encoder_zero_table_zero_bias():
    base = AdapterState.init(2, 4, 2, k=3, seed=1)
    z = AdapterState({**base.params, "soft_table": torch.zeros(2, 3, 4, dtype=torch.float64),
                      "enc_b1": torch.zeros(4, dtype=torch.float64), "enc_b2": torch.zeros(4, dtype=torch.float64)})
    assert not encode_soft_prompts(z, 1).any()


def test_encoder_layer_by_layer_oracle():
    from math import erf, sqrt

    rng = np.random.default_rng(5)
    table = rng.normal(size=(2, 3, 4))
    w1, b1 = rng.normal(size=(4, 4)), rng.normal(size=4)
    w2, b2 = rng.normal(size=(4, 4)), rng.normal(size=4)
    base = AdapterState.init(2, 4, 2, k=3)
    s = AdapterState({**base.params, **{k: torch.from_numpy(v) for k, v in
                                        dict(soft_table=table, enc_w1=w1, enc_b1=b1, enc_w2=w2, enc_b2=b2).items()}})
    for c in range(2):
        pre = table[c] @ w1.T + b1
        hidden = np.vectorize(lambda z: 0.5 * z * (1 + erf(z / sqrt(2))))(pre)
        np.testing.assert_allclose(encode_soft_prompts(s, c).numpy(), hidden @ w2.T + b2, rtol=0, atol=1e-12)


def test_encoder_category_range():
    with pytest.raises(AdapterError):
        encode_soft_prompts(AdapterState.init(2, 4, 2), 2)


# --- state --------------------------------------------------------------------

def test_init_scales():
    s = AdapterState.init(64, 32, 3, k=3, seed=0)
    bound = (6 / (64 + 32)) ** 0.5
    assert float(s.proj_w.abs().max()) <= bound and not s.proj_b.any()
    assert s.soft_table.shape == (3, 3, 32) and abs(float(s.soft_table.std()) - 0.02) < 0.005
    assert s.d_hidden == 32 and s.is_finite()
    assert AdapterState.init(64, 32, 3, seed=0).checksum() == s.checksum()


def test_state_shape_validation():
    s = AdapterState.init(4, 8, 2)
    with pytest.raises(AdapterError):
        AdapterState({**s.params, "proj_b": torch.zeros(7, dtype=torch.float64)})
    with pytest.raises(AdapterError):
        AdapterState({k: v for k, v in s.params.items() if k != "enc_w2"})


def test_adapter_checkpoint_round_trip(tmp_path):
    s = AdapterState.init(5, 8, 3, k=2, d_hidden=6, seed=4)
    save_adapter(s, tmp_path / "a.bin")
    raw = (tmp_path / "a.bin").read_bytes()
    assert struct.unpack_from("<4sIIIIII", raw) == (b"GALA", 1, 5, 8, 3, 2, 6)
    n_values = sum(s.params[k].numel() for k in PARAM_ORDER)
    assert len(raw) == struct.calcsize("<4sIIIIII") + 8 * n_values
    back = load_adapter(tmp_path / "a.bin")
    assert back.checksum() == s.checksum()
    # blobs follow the documented order
    off = struct.calcsize("<4sIIIIII")
    first = np.frombuffer(raw, "<f8", count=s.proj_w.numel(), offset=off)
    np.testing.assert_array_equal(first, s.proj_w.numpy().ravel())


def test_adapter_checkpoint_rejects_garbage(tmp_path):
    s = AdapterState.init(5, 8, 3)
    save_adapter(s, tmp_path / "a.bin")
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "bad").write_bytes(b"NOPE" + raw[4:])
    (tmp_path / "long").write_bytes(raw + b"\0" * 8)
    for name in ("bad", "long"):
        with pytest.raises(AdapterError):
            load_adapter(tmp_path / name)


# --- assembly -----------------------------------------------------------------

def test_plain_text_example_matches_token_path(graph, toy):
    # real instructions always carry a graph block; bypass validation for the no-splice path
    ex = object.__new__(InstructionExample)
    for name, value in dict(segments=(Text("just text"),), target="c1", task=Task.NODE_CLASS, stage=2, center=0,
                            prompt_mode=PromptMode.NONE, meta={}).items():
        object.__setattr__(ex, name, value)
    a = assemble_input(ex, graph, toy, AdapterState.init(graph.feature_dim, 32, 3))
    ids = tokenize("just text") + tokenize(ANSWER_PREFIX) + [BOS_ID] + tokenize("c1") + [EOS_ID]
    assert a.tokens.tolist() == ids
    assert torch.equal(a.embeddings, toy.embed_tokens(ids))
    assert (a.provenance == Tag.TEXT).all()


def test_text_matching_has_13_graph_positions(toy):
    g = small_graph(6, [(0, 1), (0, 2), (0, 3), (1, 4), (3, 5)], dim=8)
    ex = gen_text_matching(g, 0, GenConfig(s=3, h=2, n_hard=3, n_easy=0), seed=0)
    a = assemble_input(ex, g, toy, AdapterState.init(8, 32, 1))
    graph_pos = np.flatnonzero(a.provenance == Tag.GRAPH)
    assert len(graph_pos) == 13
    assert np.all(np.diff(graph_pos) == 1)
    assert (a.tokens[graph_pos] == GRAPH_ID).all()


def test_soft_mode_nine_soft_positions(graph, toy):
    ex = gen_node_classification(graph, 0, PromptMode.SOFT, GenConfig(), seed=0)
    state = AdapterState.init(graph.feature_dim, 32, 3, k=3, seed=1)
    a = assemble_input(ex, graph, toy, state)
    soft = np.flatnonzero(a.provenance == Tag.SOFT)
    assert len(soft) == 9 and (a.tokens[soft] == SOFT_ID).all()
    for c in range(3):
        torch.testing.assert_close(a.embeddings[soft[3 * c : 3 * c + 3]], encode_soft_prompts(state, c),
                                   rtol=0, atol=0)
    assert (a.provenance == Tag.GRAPH).sum() == 111


def test_non_placeholder_rows_bit_identical(graph, toy):
    ex = gen_node_classification(graph, 3, PromptMode.SOFT, GenConfig(s=3, h=2), seed=2)
    state = AdapterState.init(graph.feature_dim, 32, 3, k=3, seed=2)
    a = assemble_input(ex, graph, toy, state)
    text = a.provenance == Tag.TEXT
    assert torch.equal(a.embeddings[torch.from_numpy(text)], toy.embed_tokens(a.tokens[torch.from_numpy(text)]))


def test_graph_rows_are_projected_sequence(graph, toy):
    from graphalign.template import sequence_embeddings

    ex = gen_node_classification(graph, 5, PromptMode.MANUAL, GenConfig(s=3, h=2), seed=0)
    state = AdapterState.init(graph.feature_dim, 32, 3, seed=0)
    a = assemble_input(ex, graph, toy, state)
    pos = np.flatnonzero(a.provenance == Tag.GRAPH)
    want = project(sequence_embeddings(graph, ex.graph_blocks[0]), state)
    assert torch.equal(a.embeddings[pos], want)


def test_target_mask_suffix(graph, toy):
    ex = gen_node_classification(graph, 1, PromptMode.MANUAL, GenConfig(s=2, h=1), seed=0)
    a = assemble_input(ex, graph, toy, AdapterState.init(graph.feature_dim, 32, 3))
    m = a.target_mask.numpy()
    assert m.sum() == len(tokenize(ex.target)) + 1
    first = int(np.argmax(m))
    assert m[first:].all() and not m[:first].any()
    assert a.tokens[first - 1] == BOS_ID and a.tokens[-1] == EOS_ID
    prefix = assemble_input(ex, graph, toy, AdapterState.init(graph.feature_dim, 32, 3), include_target=False)
    assert len(prefix) == first and not prefix.target_mask.any()


def test_link_prediction_two_blocks(graph, toy):
    ex = gen_link_prediction(graph, (0, 1), False, PromptMode.MANUAL, GenConfig(s=2, h=2), seed=0)
    a = assemble_input(ex, graph, toy, AdapterState.init(graph.feature_dim, 32, 2))
    assert (a.provenance == Tag.GRAPH).sum() == 14


def test_assembly_errors(graph):
    ex = gen_node_classification(graph, 0, PromptMode.SOFT, GenConfig(s=2, h=1), seed=0)
    tiny = ToyTransformer(ToyConfig(context_length=64), seed=0)
    with pytest.raises(ContextOverflow):
        assemble_input(ex, graph, tiny, AdapterState.init(graph.feature_dim, 32, 3))
    big = ToyTransformer(seed=0)
    with pytest.raises(AdapterError):
        assemble_input(ex, graph, big, AdapterState.init(graph.feature_dim, 32, 3, k=2))
    with pytest.raises(AdapterError):
        assemble_input(ex, graph, big, AdapterState.init(graph.feature_dim + 1, 32, 3))
