import numpy as np
import pytest

from groundgraph import tensor as tt
from groundgraph.graph import BuilderConfig, adjacency_matrix, build_ground_graph
from groundgraph.model import (
    BOS,
    EOS,
    SEP,
    CheckpointError,
    ConfigError,
    EncodedState,
    ModelConfig,
    ModelParams,
    TokenOutOfVocab,
    TrainExample,
    Vocab,
    concat_input_ids,
    decode_layer,
    encode,
    encode_text,
    forward,
    forward_example,
    generate,
    graph_encode,
    init_node_reps,
    load_checkpoint,
    save_checkpoint,
)
from groundgraph.tensor import GRAPH_RELEVANT, OTHER, Tensor, finite_diff_check
from groundgraph.training import examples_from_documents
from conftest import random_documents, spread_example
from test_tensor import reference_attention

rng = np.random.default_rng(7)


def toy_config(**kw):
    base = dict(
        vocab_size=32,
        d_model=8,
        heads=2,
        encoder_layers=1,
        graph_layers=1,
        decoder_layers=1,
        max_context_len=16,
        max_knowledge_len=24,
        max_target_len=8,
        max_nodes=16,
    )
    base.update(kw)
    return ModelConfig(**base)


def toy_example(cfg=None, doc=None):
    doc = doc or spread_example()
    vocab = Vocab.from_documents([doc])
    cfg = cfg or toy_config(vocab_size=len(vocab))
    examples = examples_from_documents([doc], vocab, cfg)
    assert len(examples) == 1
    return examples[0], vocab, cfg


# ---------------------------------------------------------------------------
# config / params
# ---------------------------------------------------------------------------


def test_config_rejects_double_ablation():
    with pytest.raises(ConfigError):
        toy_config(use_graph=False, use_sequence=False).validate()


def test_config_rejects_bad_head_split():
    with pytest.raises(ConfigError):
        toy_config(d_model=6, heads=4).validate()


def test_parameter_grouping_is_exactly_the_graph_path():
    cfg = toy_config()
    params = ModelParams.init(cfg, seed=0)
    graph_named = {n for n, p in params.params.items() if p.group == GRAPH_RELEVANT}
    expected = {n for n in params.names() if n.startswith(("graph0.", "node_init.", "supernode_emb"))}
    expected |= {n for n in params.names() if ".graph_attn." in n or ".fuse." in n}
    assert graph_named == expected
    assert all(params.param(n).group == OTHER for n in params.names() if n not in expected)


def test_graph_layers_start_as_encoder_copies():
    cfg = toy_config(encoder_layers=2, graph_layers=2)
    params = ModelParams.init(cfg, seed=3)
    for i in range(2):
        assert np.array_equal(
            params[f"graph{i}.attn.wq"].data, params[f"enc{i}.attn.wq"].data
        )
        assert np.array_equal(params[f"graph{i}.ff.w1"].data, params[f"enc{i}.ff.w1"].data)
    for suffix in ("wq", "wk", "wv", "wo"):
        assert np.array_equal(
            params[f"dec0.graph_attn.{suffix}"].data, params[f"dec0.cross.{suffix}"].data
        )


def test_param_init_deterministic():
    cfg = toy_config()
    a = ModelParams.init(cfg, seed=5)
    b = ModelParams.init(cfg, seed=5)
    for n in a.names():
        assert np.array_equal(a[n].data, b[n].data)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def test_concat_input_inserts_separators():
    cfg = toy_config()
    ids = concat_input_ids([5, 6], [[7], [8, 9]], cfg)
    assert ids == [5, 6, SEP, 7, SEP, 8, 9]


def test_empty_knowledge_still_encodes():
    cfg = toy_config()
    params = ModelParams.init(cfg, seed=0)
    h_k, h_c = encode_text([5, 6], [], params, cfg)
    assert h_k.data.shape == (2, cfg.d_model)
    assert h_c.data.shape == (2, cfg.d_model)


def test_encoding_deterministic():
    cfg = toy_config()
    params = ModelParams.init(cfg, seed=0)
    a = encode_text([5, 6, 7], [[8, 9]], params, cfg)
    b = encode_text([5, 6, 7], [[8, 9]], params, cfg)
    assert np.array_equal(a[0].data, b[0].data)
    assert np.array_equal(a[1].data, b[1].data)


def test_knowledge_perturbation_leaves_context_encoding_alone():
    cfg = toy_config()
    params = ModelParams.init(cfg, seed=0)
    h_k1, h_c1 = encode_text([5, 6, 7], [[8, 9]], params, cfg)
    h_k2, h_c2 = encode_text([5, 6, 7], [[8, 10]], params, cfg)
    assert not np.array_equal(h_k1.data, h_k2.data)
    assert np.array_equal(h_c1.data, h_c2.data)


def test_token_out_of_vocab():
    cfg = toy_config(vocab_size=10)
    params = ModelParams.init(cfg, seed=0)
    with pytest.raises(TokenOutOfVocab):
        encode_text([11], [], params, cfg)


# ---------------------------------------------------------------------------
# node init
# ---------------------------------------------------------------------------


def test_single_token_span_is_projected_token_row():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    h_k, _ = encode_text(ex.context_ids, ex.knowledge_ids, params, cfg)
    nid = next(iter(ex.alignment))
    single = {nid: (ex.alignment[nid][0],)}
    out = init_node_reps(h_k, single, params, [nid])
    row = h_k.data[ex.alignment[nid][0]]
    expected = np.concatenate([row, row])[None, :] @ params["node_init.w"].data
    assert np.allclose(out.data, expected, atol=1e-12)


def test_identical_spans_give_identical_reps():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    h_k, _ = encode_text(ex.context_ids, ex.knowledge_ids, params, cfg)
    alignment = {1: (0, 2), 2: (0, 2)}
    out = init_node_reps(h_k, alignment, params, [1, 2])
    assert np.array_equal(out.data[0], out.data[1])


def test_cross_source_node_matches_pooling_oracle():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    h_k, _ = encode_text(ex.context_ids, ex.knowledge_ids, params, cfg)
    merged = [nid for nid, pos in ex.alignment.items() if len(pos) == 4]
    assert merged, "worked example should contain the cross-source merged node"
    nid = merged[0]
    out = init_node_reps(h_k, ex.alignment, params, [nid])
    rows = h_k.data[list(ex.alignment[nid])]
    pooled = np.concatenate([rows.mean(axis=0), rows.max(axis=0)])[None, :]
    assert np.allclose(out.data, pooled @ params["node_init.w"].data, atol=1e-12)


def test_supernode_gets_learned_embedding():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    h_k, _ = encode_text(ex.context_ids, ex.knowledge_ids, params, cfg)
    order = ex.graph.node_ids()
    out = init_node_reps(h_k, ex.alignment, params, order, ex.graph.supernode_id)
    srow = order.index(ex.graph.supernode_id)
    assert np.array_equal(out.data[srow], params["supernode_emb"].data[0])


# ---------------------------------------------------------------------------
# graph encoding
# ---------------------------------------------------------------------------


def test_disconnected_components_do_not_mix_in_one_layer():
    cfg = toy_config(graph_layers=1)
    params = ModelParams.init(cfg, seed=0)
    adj = np.array(
        [
            [1, 1, 0, 0],
            [1, 1, 0, 0],
            [0, 0, 1, 1],
            [0, 0, 1, 1],
        ],
        dtype=float,
    )
    h0 = rng.normal(size=(4, cfg.d_model))
    out1 = graph_encode(Tensor(h0), adj, params, cfg)
    perturbed = h0.copy()
    perturbed[0] += 1.0  # hit component {0,1} only
    out2 = graph_encode(Tensor(perturbed), adj, params, cfg)
    assert np.array_equal(out1.data[2:], out2.data[2:])
    assert not np.array_equal(out1.data[:2], out2.data[:2])


def test_full_connect_equals_explicit_all_ones():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    h0 = Tensor(rng.normal(size=(5, cfg.d_model)))
    via_flag = graph_encode(h0, np.eye(5), params, toy_config(vocab_size=cfg.vocab_size, full_connect=True))
    via_mask = graph_encode(h0, np.ones((5, 5)), params, cfg)
    assert np.array_equal(via_flag.data, via_mask.data)


def test_multiplicative_mask_flag_changes_graph_encoding():
    cfg_add = toy_config()
    cfg_mult = toy_config(multiplicative_mask=True)
    params = ModelParams.init(cfg_add, seed=0)
    adj = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=float)
    h0 = rng.normal(size=(3, cfg_add.d_model)) * 3
    add_out = graph_encode(Tensor(h0), adj, params, cfg_add)
    mult_out = graph_encode(Tensor(h0), adj, params, cfg_mult)
    assert not np.allclose(add_out.data, mult_out.data)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def np_layer_norm(x, gain, bias, eps=1e-12):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def test_decode_layer_matches_straight_line_reference():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=1)
    state = encode(ex, params, cfg)
    t = 2
    y = rng.normal(size=(t, cfg.d_model))
    causal = np.tril(np.ones((t, t)))
    got = decode_layer(Tensor(y), state, params, 0, cfg, causal).data

    def p(name):
        return params[name].data

    def attn(q_in, mem, prefix, mask):
        return reference_attention(
            q_in @ p(f"{prefix}.wq"), mem @ p(f"{prefix}.wk"), mem @ p(f"{prefix}.wv"),
            cfg.heads, mask,
        ) @ p(f"{prefix}.wo")

    ones = lambda rows, cols: np.ones((rows, cols))
    y_n = np_layer_norm(y, p("dec0.ln1.gain"), p("dec0.ln1.bias"))
    a = y + attn(y_n, y_n, "dec0.self", causal)
    hc = state.h_c.data
    a_n = np_layer_norm(a, p("dec0.ln2.gain"), p("dec0.ln2.bias"))
    c = a + attn(a_n, hc, "dec0.cross", ones(t, hc.shape[0]))
    c_n = np_layer_norm(c, p("dec0.ln3.gain"), p("dec0.ln3.bias"))
    g = attn(c_n, state.h_g.data, "dec0.graph_attn", ones(t, state.h_g.data.shape[0]))
    d = attn(c_n, state.h_k.data, "dec0.doc_attn", ones(t, state.h_k.data.shape[0]))
    h = c + np.concatenate([g, d], axis=1) @ p("dec0.fuse.w")
    h_n = np_layer_norm(h, p("dec0.ln4.gain"), p("dec0.ln4.bias"))
    expected = h + np_gelu(h_n @ p("dec0.ff.w1") + p("dec0.ff.b1")) @ p("dec0.ff.w2") + p("dec0.ff.b2")
    assert np.allclose(got, expected, atol=1e-10)


def test_single_node_graph_attention_ignores_query():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    single = Tensor(rng.normal(size=(1, cfg.d_model)))
    state1 = EncodedState(h_k=Tensor(rng.normal(size=(3, cfg.d_model))),
                          h_c=Tensor(rng.normal(size=(2, cfg.d_model))), h_g=single)
    cfg_go = toy_config(vocab_size=cfg.vocab_size, use_sequence=False)
    causal = np.tril(np.ones((2, 2)))
    y1 = Tensor(rng.normal(size=(2, cfg.d_model)))
    y2 = Tensor(rng.normal(size=(2, cfg.d_model)))
    out1 = decode_layer(y1, state1, params, 0, cfg_go, causal)
    out2 = decode_layer(y2, state1, params, 0, cfg_go, causal)
    # the graph feature is the projected node value whatever the query is
    dh = cfg.d_model // cfg.heads
    vproj = single.data @ params["dec0.graph_attn.wv"].data
    expected_g = np.concatenate([vproj[:, h * dh : (h + 1) * dh] for h in range(cfg.heads)], axis=1)
    expected_g = expected_g @ params["dec0.graph_attn.wo"].data
    assert not np.array_equal(out1.data, out2.data)  # residual path still moves
    # isolate the knowledge feature: subtract the pre-fusion residual input
    # by recomputing it for both runs and comparing the difference
    from groundgraph.model import _cross_attention

    g1 = _cross_attention(y1, single, params, "dec0.graph_attn", cfg_go)
    g2 = _cross_attention(y2, single, params, "dec0.graph_attn", cfg_go)
    assert np.allclose(g1.data, expected_g, atol=1e-12)
    assert np.allclose(g1.data[0], g2.data[1], atol=1e-12)


def test_sequence_ablated_decoder_ignores_knowledge_tokens():
    ex, vocab, _ = toy_example()
    cfg = toy_config(vocab_size=len(vocab), use_sequence=False)
    params = ModelParams.init(cfg, seed=0)
    h_c = Tensor(rng.normal(size=(3, cfg.d_model)))
    h_g = Tensor(rng.normal(size=(4, cfg.d_model)))
    y = Tensor(rng.normal(size=(2, cfg.d_model)))
    causal = np.tril(np.ones((2, 2)))
    s1 = EncodedState(h_k=Tensor(rng.normal(size=(6, cfg.d_model))), h_c=h_c, h_g=h_g)
    s2 = EncodedState(h_k=Tensor(rng.normal(size=(9, cfg.d_model))), h_c=h_c, h_g=h_g)
    out1 = decode_layer(y, s1, params, 0, cfg, causal)
    out2 = decode_layer(y, s2, params, 0, cfg, causal)
    assert np.array_equal(out1.data, out2.data)


def test_sequence_ablation_keeps_knowledge_in_node_init():
    # the ablation removes only the decoder's document-attention branch;
    # knowledge tokens still shape the node representations
    doc = spread_example()
    vocab = Vocab.from_documents([doc])
    cfg = toy_config(vocab_size=len(vocab), use_sequence=False)
    params = ModelParams.init(cfg, seed=0)
    ex = examples_from_documents([doc], vocab, cfg)[0]
    base = forward_example(ex, params, cfg).data
    changed_ids = list(ex.knowledge_ids[0])
    changed_ids[0] = (changed_ids[0] + 1) % cfg.vocab_size
    perturbed = TrainExample(
        example_id=ex.example_id, context_ids=ex.context_ids,
        knowledge_ids=[changed_ids], target_ids=ex.target_ids,
        graph=ex.graph, alignment=ex.alignment,
    )
    assert not np.array_equal(base, forward_example(perturbed, params, cfg).data)


def test_graph_ablated_forward_invariant_to_graph_content(tmp_path):
    doc = spread_example()
    vocab = Vocab.from_documents([doc])
    cfg = toy_config(vocab_size=len(vocab), use_graph=False)
    params = ModelParams.init(cfg, seed=0)
    ex = examples_from_documents([doc], vocab, cfg)[0]
    logits1 = forward_example(ex, params, cfg).data
    other = examples_from_documents([doc], vocab, cfg, BuilderConfig(sp=False, pc=False))[0]
    swapped = TrainExample(
        example_id=ex.example_id,
        context_ids=ex.context_ids,
        knowledge_ids=ex.knowledge_ids,
        target_ids=ex.target_ids,
        graph=other.graph,
        alignment=other.alignment,
    )
    logits2 = forward_example(swapped, params, cfg).data
    assert np.array_equal(logits1, logits2)


# ---------------------------------------------------------------------------
# forward / causality / generation
# ---------------------------------------------------------------------------


def test_batch_of_one_equals_unbatched():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    single = forward_example(ex, params, cfg)
    batched = forward([ex], params, cfg)
    assert len(batched) == 1
    assert np.array_equal(single.data, batched[0].data)


def test_batch_permutation_permutes_logits():
    docs = [d for d in random_documents(seed=21, count=6)]
    vocab = Vocab.from_documents(docs)
    cfg = toy_config(vocab_size=len(vocab))
    params = ModelParams.init(cfg, seed=0)
    examples = examples_from_documents(docs, vocab, cfg)
    assert len(examples) >= 3
    out = forward(examples, params, cfg)
    out_rev = forward(list(reversed(examples)), params, cfg)
    for a, b in zip(out, reversed(out_rev)):
        assert np.array_equal(a.data, b.data)


def test_causality_later_targets_do_not_leak():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    base = forward_example(ex, params, cfg).data
    assert len(ex.target_ids) >= 3
    mutated = TrainExample(
        example_id=ex.example_id,
        context_ids=ex.context_ids,
        knowledge_ids=ex.knowledge_ids,
        target_ids=ex.target_ids[:-1] + [(ex.target_ids[-1] + 1) % cfg.vocab_size],
        graph=ex.graph,
        alignment=ex.alignment,
    )
    changed = forward_example(mutated, params, cfg).data
    t = len(ex.target_ids)
    assert np.array_equal(base[: t - 1], changed[: t - 1])


def test_forward_finite_on_random_documents():
    docs = random_documents(seed=33, count=30)
    vocab = Vocab.from_documents(docs)
    cfg = toy_config(vocab_size=len(vocab))
    params = ModelParams.init(cfg, seed=0)
    examples = examples_from_documents(docs, vocab, cfg)
    assert examples
    for ex in examples:
        logits = forward_example(ex, params, cfg)
        assert np.isfinite(logits.data).all()


def test_generate_zero_budget_is_empty():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    assert generate(ex, params, cfg, max_len=0) == []


def test_greedy_generation_deterministic_and_capped():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    a = generate(ex, params, cfg)
    b = generate(ex, params, cfg)
    assert a == b
    assert len(a) <= cfg.max_target_len
    assert EOS not in a and BOS not in a


def test_beam_generation_runs():
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    out = generate(ex, params, cfg, mode="beam", beam_size=2)
    assert isinstance(out, list)
    assert len(out) <= cfg.max_target_len


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=9)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, params, vocab, extra={"note": "t"})
    cfg2, params2, vocab2, extra = load_checkpoint(path)
    assert cfg2 == cfg
    assert vocab2.tokens == vocab.tokens
    assert extra == {"note": "t"}
    for n in params.names():
        assert np.array_equal(params[n].data, params2[n].data)
        assert params.param(n).group == params2.param(n).group
    before = forward_example(ex, params, cfg).data
    after = forward_example(ex, params2, cfg2).data
    assert np.array_equal(before, after)


def test_checkpoint_shape_validation(tmp_path):
    import json

    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, params, vocab)
    obj = json.loads(path.read_text())
    obj["params"]["node_init.w"]["shape"] = [1, 1]
    obj["params"]["node_init.w"]["data"] = [0.0]
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_version_validation(tmp_path):
    import json

    ex, vocab, cfg = toy_example()
    params = ModelParams.init(cfg, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, cfg, params, vocab)
    obj = json.loads(path.read_text())
    obj["version"] = 99
    path.write_text(json.dumps(obj))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# gradients through the full model (small; the acceptance suite runs the
# full-size check)
# ---------------------------------------------------------------------------


def test_quick_grad_check_subset():
    doc = spread_example(response="i love bagels too much")
    vocab = Vocab.from_documents([doc])
    cfg = toy_config(vocab_size=len(vocab), d_model=8, heads=2)
    params = ModelParams.init(cfg, seed=2)
    ex = examples_from_documents([doc], vocab, cfg)[0]

    from groundgraph.training import batch_loss

    subset = [
        params.param("node_init.w"),
        params.param("supernode_emb"),
        params.param("dec0.fuse.w"),
        params.param("graph0.attn.wq"),
        params.param("out_proj.b"),
    ]
    err = finite_diff_check(lambda: batch_loss([ex], params, cfg), subset)
    assert err < 1e-4
