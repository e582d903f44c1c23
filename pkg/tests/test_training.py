import json
import math

import numpy as np
import pytest

from groundgraph.model import EOS, ModelConfig, ModelParams, Vocab, save_checkpoint
from groundgraph.tensor import GRAPH_RELEVANT, NonFiniteLoss, ShapeMismatch, Tensor
from groundgraph.training import (
    ABLATION_VARIANTS,
    OptState,
    TrainConfig,
    batch_loss,
    examples_from_documents,
    nll_loss,
    run_ablation_suite,
    train_loop,
    train_step,
)
from conftest import random_documents, spread_example


def toy_setup(n_docs=4, seed=17, **cfg_kw):
    docs = [spread_example(example_id=f"s{i}") for i in range(2)]
    docs += random_documents(seed=seed, count=n_docs)
    vocab = Vocab.from_documents(docs)
    base = dict(
        vocab_size=len(vocab), d_model=8, heads=2, encoder_layers=1, graph_layers=1,
        decoder_layers=1, max_context_len=16, max_knowledge_len=24, max_target_len=10,
        max_nodes=16,
    )
    base.update(cfg_kw)
    cfg = ModelConfig(**base)
    examples = examples_from_documents(docs, vocab, cfg)
    return docs, vocab, cfg, examples


# ---------------------------------------------------------------------------
# nll loss
# ---------------------------------------------------------------------------


def test_one_hot_logits_drive_loss_to_zero():
    targets = [2, 0, 1]
    prev = None
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((3, 4))
        for i, t in enumerate(targets):
            logits[i, t] = margin
        loss = nll_loss(Tensor(logits), targets).item()
        if prev is not None:
            assert loss < prev
        prev = loss
    assert prev < 1e-6


def test_uniform_logits_give_log_vocab():
    v = 7
    loss = nll_loss(Tensor(np.zeros((5, v))), [0, 1, 2, 3, 4]).item()
    assert abs(loss - math.log(v)) < 1e-12


def test_random_loss_matches_per_token_computation():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 9)) * 3
    targets = list(rng.integers(0, 9, size=6))
    got = nll_loss(Tensor(logits), targets).item()
    per_token = []
    for i, t in enumerate(targets):
        row = logits[i]
        per_token.append(-(row[t] - math.log(sum(math.exp(x) for x in row))))
    assert abs(got - sum(per_token) / 6) < 1e-12


def test_padding_mask_excludes_positions():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(4, 5))
    targets = [1, 2, 3, 4]
    masked = nll_loss(Tensor(logits), targets, mask=[1, 1, 0, 0]).item()
    manual = nll_loss(Tensor(logits[:2]), targets[:2]).item()
    assert abs(masked - manual) < 1e-12


def test_nll_shape_errors():
    with pytest.raises(ShapeMismatch):
        nll_loss(Tensor(np.zeros((3, 4))), [0, 1])
    with pytest.raises(ShapeMismatch):
        nll_loss(Tensor(np.zeros((2, 4))), [0, 1], mask=[0, 0])


# ---------------------------------------------------------------------------
# train step
# ---------------------------------------------------------------------------


def test_zero_gradient_rows_change_only_by_weight_decay():
    docs, vocab, cfg, examples = toy_setup()
    params = ModelParams.init(cfg, seed=0)
    opt = OptState(params)
    tcfg = TrainConfig(batch_size=2)
    used = set(range(5))  # reserved ids: pad/bos/eos/sep/unk
    for ex in examples[:2]:
        used.update(ex.context_ids)
        for d in ex.knowledge_ids:
            used.update(d)
        used.update(ex.target_ids)
    unused = [i for i in range(cfg.vocab_size) if i not in used][:3]
    assert unused, "need at least one unused vocabulary row"
    before = params["token_emb"].data[unused].copy()
    train_step(examples[:2], params, opt, tcfg, cfg)
    after = params["token_emb"].data[unused]
    expected = before * (1.0 - tcfg.lr_other * tcfg.weight_decay)
    assert np.allclose(after, expected, rtol=0, atol=1e-15)


def test_two_identical_steps_are_bit_identical():
    docs, vocab, cfg, examples = toy_setup()
    tcfg = TrainConfig(batch_size=2, seed=5)
    runs = []
    for _ in range(2):
        params = ModelParams.init(cfg, seed=3)
        opt = OptState(params)
        loss = train_step(examples[:2], params, opt, tcfg, cfg)
        runs.append((loss, {n: params[n].data.copy() for n in params.names()}))
    assert runs[0][0] == runs[1][0]
    for n in runs[0][1]:
        assert np.array_equal(runs[0][1][n], runs[1][1][n])


def test_fifty_step_smoke_loss_decreases():
    docs, vocab, cfg, examples = toy_setup()
    params = ModelParams.init(cfg, seed=0)
    opt = OptState(params)
    tcfg = TrainConfig(batch_size=len(examples), lr_graph=5e-5, lr_other=5e-5)
    batch = examples
    losses = [train_step(batch, params, opt, tcfg, cfg) for _ in range(50)]
    assert losses[-1] < losses[0]


def test_frozen_group_lr_leaves_group_unchanged():
    docs, vocab, cfg, examples = toy_setup()
    params = ModelParams.init(cfg, seed=0)
    opt = OptState(params)
    # weight decay is lr-scaled (decoupled-decay convention), so lr 0 freezes
    # the group entirely
    tcfg = TrainConfig(batch_size=2, lr_graph=1e-30)
    graph_before = {
        n: params[n].data.copy()
        for n in params.names()
        if params.param(n).group == GRAPH_RELEVANT
    }
    other_before = {
        n: params[n].data.copy()
        for n in params.names()
        if params.param(n).group != GRAPH_RELEVANT
    }
    train_step(examples[:2], params, opt, tcfg, cfg)
    for n, v in graph_before.items():
        assert np.allclose(params[n].data, v, atol=1e-20)
    moved = sum(not np.array_equal(params[n].data, v) for n, v in other_before.items())
    assert moved > 0


def test_non_finite_loss_aborts_with_diagnostics():
    docs, vocab, cfg, examples = toy_setup()
    params = ModelParams.init(cfg, seed=0)
    params["token_emb"].data[5, 0] = np.nan
    opt = OptState(params)
    with pytest.raises(NonFiniteLoss):
        train_step(examples[:1], params, opt, TrainConfig(), cfg)


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------


def test_zero_epochs_returns_init_params():
    docs, vocab, cfg, examples = toy_setup()
    tcfg = TrainConfig(epochs=0, seed=4)
    params, losses = train_loop(examples, tcfg, cfg)
    assert losses == []
    init = ModelParams.init(cfg, seed=4)
    for n in params.names():
        assert np.array_equal(params[n].data, init[n].data)


def test_same_seed_identical_curves_and_weights(tmp_path):
    docs, vocab, cfg, examples = toy_setup()
    tcfg = TrainConfig(epochs=2, batch_size=3, seed=11)
    p1, l1 = train_loop(examples, tcfg, cfg)
    p2, l2 = train_loop(examples, tcfg, cfg)
    assert l1 == l2 and len(l1) > 0
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, cfg, p1, vocab)
    save_checkpoint(b, cfg, p2, vocab)
    assert a.read_bytes() == b.read_bytes()


def test_metrics_log_lines(tmp_path):
    docs, vocab, cfg, examples = toy_setup()
    path = tmp_path / "metrics.jsonl"
    tcfg = TrainConfig(epochs=1, batch_size=2, log_every=1)
    train_loop(examples, tcfg, cfg, metrics_path=path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines
    for rec in lines:
        assert set(rec) == {"step", "loss", "lr_graph", "lr_other"}
        assert rec["lr_graph"] == tcfg.lr_graph


def test_max_steps_budget():
    docs, vocab, cfg, examples = toy_setup()
    tcfg = TrainConfig(epochs=100, batch_size=2, max_steps=5)
    _, losses = train_loop(examples, tcfg, cfg)
    assert len(losses) == 5


# ---------------------------------------------------------------------------
# corpus assembly
# ---------------------------------------------------------------------------


def test_documents_without_response_are_skipped():
    doc = spread_example(response=None)
    vocab = Vocab.from_documents([doc])
    cfg = ModelConfig(vocab_size=len(vocab), d_model=8, heads=2, max_context_len=16,
                      max_knowledge_len=16, max_target_len=8)
    assert examples_from_documents([doc], vocab, cfg) == []


def test_targets_end_with_eos():
    docs, vocab, cfg, examples = toy_setup()
    for ex in examples:
        assert ex.target_ids[-1] == EOS
        assert len(ex.target_ids) <= cfg.max_target_len


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------


def test_ablation_suite_emits_eight_distinct_rows():
    docs = [spread_example(example_id=f"s{i}", response="i spread butter on bagels") for i in range(3)]
    vocab = Vocab.from_documents(docs)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=8, heads=2, encoder_layers=1,
                      graph_layers=1, decoder_layers=1, max_context_len=16,
                      max_knowledge_len=24, max_target_len=8, max_nodes=16)
    tcfg = TrainConfig(epochs=1, batch_size=3, seed=0)
    rows = run_ablation_suite(docs, tcfg, cfg, vocab=vocab)
    assert [r["variant"] for r in rows] == list(ABLATION_VARIANTS)
    for r in rows:
        for key in ("bleu2", "bleu4", "rouge1", "rouge2"):
            assert 0.0 <= r[key] <= 1.0

    base_builder = rows[0]["builder_cfg"]
    base_model = rows[0]["model_cfg"]
    toggles = {
        "w/o SP": ("sp", base_builder),
        "w/o PC": ("pc", base_builder),
        "w/o MC": ("mc", base_builder),
        "w/o GA": ("ga", base_builder),
        "w/o structure": ("full_connect", base_model),
        "w/o sequence": ("use_sequence", base_model),
        "w/o graph": ("use_graph", base_model),
    }
    for row in rows[1:]:
        field, base = toggles[row["variant"]]
        changed = row["builder_cfg"] if base is base_builder else row["model_cfg"]
        same = row["model_cfg"] if base is base_builder else row["builder_cfg"]
        assert same == (base_model if base is base_builder else base_builder)
        diffs = {
            k for k in vars(base) if getattr(base, k) != getattr(changed, k)
        }
        assert diffs == {field}
