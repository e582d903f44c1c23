"""Teacher-forced NLL training with per-group learning rates.

Graph-relevant parameters (node init, graph encoder, decoder graph attention,
fusion, supernode embedding) train at lr_graph; everything else at lr_other.
The optimizer is adaptive-moment with decoupled weight decay and global
gradient-norm clipping.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace

import numpy as np

from . import metrics as metrics_mod
from . import tensor as tt
from .annotations import AnnotatedDocument
from .graph import BuilderConfig, EmptyGraph, build_ground_graph
from .model import (
    EOS,
    ModelConfig,
    ModelParams,
    TrainExample,
    Vocab,
    forward_example,
    generate,
)
from .tensor import GRAPH_RELEVANT, NonFiniteLoss, ShapeMismatch, Tensor


@dataclass
class TrainConfig:
    lr_graph: float = 5e-4
    lr_other: float = 5e-5
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    max_steps: int | None = None  # step budget; caps epochs when set
    stop_loss: float | None = None  # early exit once the batch loss drops below
    log_every: int = 10

    def validate(self) -> None:
        if self.lr_graph <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def nll_loss(logits: Tensor, targets: list[int], mask: list[int] | None = None) -> Tensor:
    """Negative log-likelihood averaged over unmasked target positions."""
    n = logits.data.shape[0]
    if len(targets) != n:
        raise ShapeMismatch(f"{n} logit rows vs {len(targets)} targets")
    m = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    if m.shape != (n,):
        raise ShapeMismatch(f"mask shape {m.shape} vs {n} targets")
    kept = m.sum()
    if kept == 0:
        raise ShapeMismatch("all target positions masked")
    chosen = tt.pick(tt.log_softmax(logits), targets)
    return tt.scale(tt.sum_all(tt.mul(chosen, Tensor(m))), -1.0 / kept)


def batch_loss(batch: list[TrainExample], params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Mean NLL over all target tokens of the batch."""
    pieces = []
    total = 0
    for ex in batch:
        logits = forward_example(ex, params, cfg)
        targets = ex.target_ids[: cfg.max_target_len]
        pieces.append(tt.sum_all(tt.pick(tt.log_softmax(logits), targets)))
        total += len(targets)
    summed = pieces[0]
    for p in pieces[1:]:
        summed = tt.add(summed, p)
    return tt.scale(summed, -1.0 / total)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class OptState:
    def __init__(self, params: ModelParams):
        self.m = {n: np.zeros_like(p.value.data) for n, p in params.params.items()}
        self.v = {n: np.zeros_like(p.value.data) for n, p in params.params.items()}
        self.t = 0


def _clip_gradients(params: ModelParams, clip_norm: float) -> float:
    total = 0.0
    for p in params.all():
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = math.sqrt(total)
    if clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
        for p in params.all():
            if p.value.grad is not None:
                p.value.grad *= scale
    return norm


def train_step(
    batch: list[TrainExample],
    params: ModelParams,
    opt: OptState,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
) -> float:
    """One forward/backward/update pass; returns the batch loss."""
    cfg.validate()
    tt.zero_grads(params.all())
    loss = batch_loss(batch, params, model_cfg)
    if not np.isfinite(loss.data):
        ids = [ex.example_id for ex in batch]
        raise NonFiniteLoss(f"loss is {loss.data} on batch {ids} at step {opt.t + 1}")
    loss.backward()
    _clip_gradients(params, cfg.clip_norm)

    opt.t += 1
    bc1 = 1.0 - cfg.beta1**opt.t
    bc2 = 1.0 - cfg.beta2**opt.t
    for name, p in params.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value.data)
        lr = cfg.lr_graph if p.group == GRAPH_RELEVANT else cfg.lr_other
        m = opt.m[name]
        v = opt.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.value.data -= lr * (update + cfg.weight_decay * p.value.data)
    return float(loss.data)


def train_loop(
    examples: list[TrainExample],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    params: ModelParams | None = None,
    metrics_path=None,
) -> tuple[ModelParams, list[float]]:
    """Epochs of seeded shuffling over the corpus; returns final parameters and
    the per-step loss curve. A metrics file gets one JSON line per step."""
    cfg.validate()
    if not examples:
        raise ValueError("training corpus is empty")
    if params is None:
        params = ModelParams.init(model_cfg, seed=cfg.seed)
    opt = OptState(params)
    losses: list[float] = []
    log = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        epoch = 0
        done = False
        while not done:
            if cfg.max_steps is None and epoch >= cfg.epochs:
                break
            if cfg.max_steps is not None and opt.t >= cfg.max_steps:
                break
            order = list(range(len(examples)))
            random.Random(cfg.seed * 1_000_003 + epoch).shuffle(order)
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and opt.t >= cfg.max_steps:
                    done = True
                    break
                batch = [examples[i] for i in order[start : start + cfg.batch_size]]
                loss = train_step(batch, params, opt, cfg, model_cfg)
                losses.append(loss)
                if log and (opt.t % cfg.log_every == 0 or opt.t == 1):
                    log.write(
                        json.dumps(
                            {"step": opt.t, "loss": loss,
                             "lr_graph": cfg.lr_graph, "lr_other": cfg.lr_other}
                        )
                        + "\n"
                    )
                if cfg.stop_loss is not None and loss < cfg.stop_loss:
                    done = True
                    break
            epoch += 1
            if cfg.max_steps is None and epoch >= cfg.epochs:
                break
    finally:
        if log:
            log.close()
    return params, losses


# ---------------------------------------------------------------------------
# corpus assembly
# ---------------------------------------------------------------------------


def builder_config_for(model_cfg: ModelConfig, base: BuilderConfig | None = None) -> BuilderConfig:
    """Builder caps must mirror the model caps or alignment positions would
    miss the encoder input; derive them instead of trusting the caller."""
    base = base or BuilderConfig()
    return replace(
        base,
        max_nodes=model_cfg.max_nodes,
        max_context_len=model_cfg.max_context_len,
        max_knowledge_len=model_cfg.max_knowledge_len,
    )


def examples_from_documents(
    docs: list[AnnotatedDocument],
    vocab: Vocab,
    model_cfg: ModelConfig,
    builder_cfg: BuilderConfig | None = None,
    require_response: bool = True,
) -> list[TrainExample]:
    """Build graphs and token ids for every document; degenerate documents
    (empty graph, missing response) are skipped."""
    bcfg = builder_config_for(model_cfg, builder_cfg)
    out = []
    for doc in docs:
        if require_response and not doc.response:
            continue
        try:
            graph, alignment = build_ground_graph(doc, bcfg)
        except EmptyGraph:
            continue
        context = [t.surface for s in doc.context_sentences for t in s.tokens]
        knowledge = [
            [t.surface for s in doc_sents for t in s.tokens]
            for doc_sents in doc.knowledge_sentences
        ]
        target: list[int] = []
        if doc.response:
            target = vocab.encode(list(doc.response))[: model_cfg.max_target_len - 1] + [EOS]
        out.append(
            TrainExample(
                example_id=doc.example_id,
                context_ids=vocab.encode(context),
                knowledge_ids=[vocab.encode(k) for k in knowledge],
                target_ids=target,
                graph=graph,
                alignment=alignment,
            )
        )
    return out


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (
    "full",
    "w/o SP",
    "w/o PC",
    "w/o MC",
    "w/o GA",
    "w/o structure",
    "w/o sequence",
    "w/o graph",
)


def _variant_configs(
    variant: str, builder: BuilderConfig, model_cfg: ModelConfig
) -> tuple[BuilderConfig, ModelConfig]:
    if variant == "full":
        return builder, model_cfg
    if variant == "w/o SP":
        return replace(builder, sp=False), model_cfg
    if variant == "w/o PC":
        return replace(builder, pc=False), model_cfg
    if variant == "w/o MC":
        return replace(builder, mc=False), model_cfg
    if variant == "w/o GA":
        return replace(builder, ga=False), model_cfg
    if variant == "w/o structure":
        return builder, replace(model_cfg, full_connect=True)
    if variant == "w/o sequence":
        return builder, replace(model_cfg, use_sequence=False)
    if variant == "w/o graph":
        return builder, replace(model_cfg, use_graph=False)
    raise ValueError(f"unknown ablation variant {variant!r}")


def run_ablation_suite(
    docs: list[AnnotatedDocument],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    vocab: Vocab | None = None,
) -> list[dict]:
    """Train and evaluate every ablation variant on the same corpus.

    Each row reports train-corpus BLEU-2/4 and ROUGE-1/2 of greedy decodes
    against the reference responses, plus the exact configs the variant used.
    """
    vocab = vocab or Vocab.from_documents(docs)
    base_builder = builder_config_for(model_cfg)
    rows = []
    for variant in ABLATION_VARIANTS:
        bcfg, mcfg = _variant_configs(variant, base_builder, model_cfg)
        examples = examples_from_documents(docs, vocab, mcfg, bcfg)
        params, _ = train_loop(examples, train_cfg, mcfg)
        pairs = []
        by_id = {d.example_id: d for d in docs}
        for ex in examples:
            hyp = vocab.decode(generate(ex, params, mcfg))
            ref = [w.lower() for w in by_id[ex.example_id].response or ()]
            pairs.append(metrics_mod.EvalPair(hypothesis=hyp, reference=ref))
        rows.append(
            {
                "variant": variant,
                "bleu2": metrics_mod.corpus_bleu(pairs, max_n=2),
                "bleu4": metrics_mod.corpus_bleu(pairs, max_n=4),
                "rouge1": metrics_mod.corpus_rouge(pairs, "1"),
                "rouge2": metrics_mod.corpus_rouge(pairs, "2"),
                "builder_cfg": bcfg,
                "model_cfg": mcfg,
            }
        )
    return rows


def ablation_report(rows: list[dict]) -> str:
    lines = [f"{'variant':<16} {'BLEU-2/4':>15} {'ROUGE-1/2':>15}"]
    for r in rows:
        lines.append(
            f"{r['variant']:<16} {r['bleu2']:.4f}/{r['bleu4']:.4f} "
            f"{r['rouge1']:.4f}/{r['rouge2']:.4f}"
        )
    return "\n".join(lines) + "\n"
