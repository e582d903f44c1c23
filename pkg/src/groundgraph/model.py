"""Graph-aware encoder-decoder over token sequences and phrase graphs.

One text encoder produces contextualized representations of the concatenated
context + knowledge input (H_k) and of the context alone (H_c). Node vectors
are pooled from H_k rows via the node alignment map, then refined by
transformer layers whose self-attention mask is the graph adjacency matrix.
Each decoder layer attends to the context, then queries both the node
representations and the knowledge tokens with that attended state, and fuses
the two knowledge features through a learned linear map.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tt
from .annotations import AnnotatedDocument
from .graph import AlignmentMap, GroundGraph, adjacency_matrix, input_layout
from .tensor import GRAPH_RELEVANT, OTHER, Parameter, Tensor

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")


class ModelError(Exception):
    pass


class TokenOutOfVocab(ModelError):
    pass


class ConfigError(ModelError):
    pass


class CheckpointError(ModelError):
    pass


def tokenize(text: str) -> list[str]:
    """Whitespace + lowercase; the single tokenizer for model and metrics."""
    return text.lower().split()


class Vocab:
    """Closed lowercased vocabulary with reserved special tokens."""

    def __init__(self, words: list[str]):
        self.tokens = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> list[int]:
        return [self.index.get(w.lower(), UNK) for w in words]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def from_documents(cls, docs: list[AnnotatedDocument]) -> "Vocab":
        words = []
        for doc in docs:
            for sent in doc.all_sentences():
                words.extend(t.surface.lower() for t in sent.tokens)
            if doc.response:
                words.extend(w.lower() for w in doc.response)
        return cls(words)


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    heads: int = 2
    encoder_layers: int = 2
    graph_layers: int = 1
    decoder_layers: int = 2
    max_context_len: int = 128
    max_knowledge_len: int = 896
    max_target_len: int = 64
    max_nodes: int = 512
    use_graph: bool = True
    use_sequence: bool = True
    full_connect: bool = False
    multiplicative_mask: bool = False  # literal product-mask attention variant

    def validate(self) -> None:
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not (self.use_graph or self.use_sequence):
            raise ConfigError("at least one of use_graph / use_sequence must be on")
        for name in ("vocab_size", "d_model", "heads", "max_target_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class TrainExample:
    """One model-ready example; token ids are already truncated and aligned."""

    example_id: str
    context_ids: list[int]
    knowledge_ids: list[list[int]]  # one list per knowledge document
    target_ids: list[int]
    graph: GroundGraph | None
    alignment: AlignmentMap | None


@dataclass
class EncodedState:
    h_k: Tensor  # concatenated context+knowledge token representations
    h_c: Tensor  # context-only token representations
    h_g: Tensor | None  # node representations (None when the graph path is off)
    node_order: list[int] | None = None


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.wq", f"{prefix}.wk", f"{prefix}.wv", f"{prefix}.wo"]


def _block_names(prefix: str) -> list[str]:
    return (
        _attn_names(f"{prefix}.attn")
        + [f"{prefix}.ln1.gain", f"{prefix}.ln1.bias"]
        + [f"{prefix}.ff.w1", f"{prefix}.ff.b1", f"{prefix}.ff.w2", f"{prefix}.ff.b2"]
        + [f"{prefix}.ln2.gain", f"{prefix}.ln2.bias"]
    )


def _is_graph_relevant(name: str) -> bool:
    if name.startswith(("graph", "node_init", "supernode_emb")):
        return True
    return ".graph_attn." in name or ".fuse." in name


class ModelParams:
    """All learnable weights, keyed by name, each tagged with its lr group."""

    def __init__(self, params: dict[str, Parameter]):
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].value

    def param(self, name: str) -> Parameter:
        return self.params[name]

    def all(self) -> list[Parameter]:
        return list(self.params.values())

    def names(self) -> list[str]:
        return list(self.params)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        cfg.validate()
        rng = np.random.default_rng(seed)
        d, ffd = cfg.d_model, 4 * cfg.d_model
        shapes: dict[str, tuple[int, ...]] = {
            "token_emb": (cfg.vocab_size, d),
            "enc_pos": (cfg.max_context_len + cfg.max_knowledge_len, d),
            "dec_pos": (cfg.max_target_len + 1, d),
        }

        def block(prefix):
            for n in _attn_names(f"{prefix}.attn"):
                shapes[n] = (d, d)
            shapes[f"{prefix}.ln1.gain"] = (d,)
            shapes[f"{prefix}.ln1.bias"] = (d,)
            shapes[f"{prefix}.ff.w1"] = (d, ffd)
            shapes[f"{prefix}.ff.b1"] = (ffd,)
            shapes[f"{prefix}.ff.w2"] = (ffd, d)
            shapes[f"{prefix}.ff.b2"] = (d,)
            shapes[f"{prefix}.ln2.gain"] = (d,)
            shapes[f"{prefix}.ln2.bias"] = (d,)

        for i in range(cfg.encoder_layers):
            block(f"enc{i}")
        shapes["enc_final.gain"] = (d,)
        shapes["enc_final.bias"] = (d,)
        for i in range(cfg.graph_layers):
            block(f"graph{i}")
        shapes["node_init.w"] = (2 * d, d)
        shapes["supernode_emb"] = (1, d)
        for i in range(cfg.decoder_layers):
            for sub in ("self", "cross", "graph_attn", "doc_attn"):
                for n in _attn_names(f"dec{i}.{sub}"):
                    shapes[n] = (d, d)
            shapes[f"dec{i}.fuse.w"] = (2 * d, d)
            for j in (1, 2, 3, 4):
                shapes[f"dec{i}.ln{j}.gain"] = (d,)
                shapes[f"dec{i}.ln{j}.bias"] = (d,)
            shapes[f"dec{i}.ff.w1"] = (d, ffd)
            shapes[f"dec{i}.ff.b1"] = (ffd,)
            shapes[f"dec{i}.ff.w2"] = (ffd, d)
            shapes[f"dec{i}.ff.b2"] = (d,)
        shapes["out_proj.w"] = (d, cfg.vocab_size)
        shapes["out_proj.b"] = (cfg.vocab_size,)

        params: dict[str, Parameter] = {}
        for name, shape in shapes.items():
            if name.endswith((".gain",)):
                data = np.ones(shape)
            elif name.endswith((".bias", ".b1", ".b2")) or name == "out_proj.b":
                data = np.zeros(shape)
            else:
                # 0.1 rather than the usual 0.02: randomly initialized desk-scale
                # models need sharper initial attention to converge in a small
                # step budget
                data = rng.normal(0.0, 0.1, size=shape)
            group = GRAPH_RELEVANT if _is_graph_relevant(name) else OTHER
            params[name] = Parameter(name, data, group)

        # graph encoder layers start from the text encoder's weights, and each
        # decoder graph attention starts from that layer's context
        # cross-attention, so the graph path begins as a copy of the text path
        for i in range(cfg.graph_layers):
            src = min(i, cfg.encoder_layers - 1)
            for name in _block_names(f"graph{i}"):
                twin = name.replace(f"graph{i}", f"enc{src}", 1)
                params[name].value.data[...] = params[twin].value.data
        for i in range(cfg.decoder_layers):
            for suffix in ("wq", "wk", "wv", "wo"):
                params[f"dec{i}.graph_attn.{suffix}"].value.data[...] = params[
                    f"dec{i}.cross.{suffix}"
                ].value.data
        return cls(params)


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _check_ids(ids: list[int], vocab_size: int) -> None:
    for t in ids:
        if not 0 <= t < vocab_size:
            raise TokenOutOfVocab(f"token id {t} outside vocabulary of size {vocab_size}")


def _embed(ids: list[int], params: ModelParams, pos_table: str) -> Tensor:
    tok = tt.take_rows(params["token_emb"], ids)
    pos = tt.take_rows(params[pos_table], list(range(len(ids))))
    return tt.add(tok, pos)


def _transformer_block(
    x: Tensor, mask, params: ModelParams, prefix: str, cfg: ModelConfig, multiplicative=False
) -> Tensor:
    """Pre-norm residual block: x + attn(LN(x)), then x + FF(LN(x))."""
    normed = tt.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    q = tt.matmul(normed, params[f"{prefix}.attn.wq"])
    k = tt.matmul(normed, params[f"{prefix}.attn.wk"])
    v = tt.matmul(normed, params[f"{prefix}.attn.wv"])
    attn = tt.multi_head_attention(
        q, k, v, cfg.heads, mask=mask, w_out=params[f"{prefix}.attn.wo"],
        multiplicative=multiplicative,
    )
    x = tt.add(x, attn)
    normed = tt.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    ff = tt.feed_forward(
        normed,
        params[f"{prefix}.ff.w1"],
        params[f"{prefix}.ff.b1"],
        params[f"{prefix}.ff.w2"],
        params[f"{prefix}.ff.b2"],
    )
    return tt.add(x, ff)


def concat_input_ids(
    context_ids: list[int], knowledge_ids: list[list[int]], cfg: ModelConfig
) -> list[int]:
    """[context; SEP; d_0; SEP; d_1; ...] truncated to the length caps,
    mirroring the layout the graph builder aligns against."""
    layout = input_layout(
        [len(context_ids)], [[len(d)] for d in knowledge_ids],
        cfg.max_context_len, cfg.max_knowledge_len,
    )
    ids = list(context_ids[: layout.kept["c.0"]])
    for d, doc in enumerate(knowledge_ids):
        ref = f"k.{d}.0"
        if layout.offsets[ref] > len(ids):  # a separator precedes this document
            ids.append(SEP)
        ids.extend(doc[: layout.kept[ref]])
    return ids


def encode_text(
    context_ids: list[int],
    knowledge_ids: list[list[int]],
    params: ModelParams,
    cfg: ModelConfig,
) -> tuple[Tensor, Tensor]:
    """(H_k, H_c): one encoder pass over the concatenated input, one over the
    context alone."""
    _check_ids(context_ids, cfg.vocab_size)
    for doc in knowledge_ids:
        _check_ids(doc, cfg.vocab_size)
    ids_k = concat_input_ids(context_ids, knowledge_ids, cfg)
    ids_c = context_ids[: cfg.max_context_len]
    h_k = _embed(ids_k, params, "enc_pos")
    h_c = _embed(ids_c, params, "enc_pos")
    for i in range(cfg.encoder_layers):
        h_k = _transformer_block(h_k, None, params, f"enc{i}", cfg)
        h_c = _transformer_block(h_c, None, params, f"enc{i}", cfg)
    h_k = tt.layer_norm(h_k, params["enc_final.gain"], params["enc_final.bias"])
    h_c = tt.layer_norm(h_c, params["enc_final.gain"], params["enc_final.bias"])
    return h_k, h_c


def init_node_reps(
    h_k: Tensor,
    alignment: AlignmentMap,
    params: ModelParams,
    node_order: list[int],
    supernode_id: int | None = None,
) -> Tensor:
    """Initial node matrix: mean+max pooled token rows projected to d_model;
    the supernode row is a learned embedding."""
    n_rows = h_k.data.shape[0]
    rows = []
    for nid in node_order:
        if nid == supernode_id:
            rows.append(params["supernode_emb"])
            continue
        positions = alignment.get(nid, ())
        if not positions:
            raise tt.EmptySpan(f"node {nid} has no aligned token positions")
        if max(positions) >= n_rows:
            raise tt.ShapeMismatch(f"node {nid} alignment exceeds encoder input length {n_rows}")
        span = tt.take_rows(h_k, list(positions))
        pooled = tt.concat([tt.mean_pool(span), tt.max_pool(span)], axis=1)
        rows.append(tt.matmul(pooled, params["node_init.w"]))
    return tt.concat(rows, axis=0)


def graph_encode(h_g0: Tensor, adjacency: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Transformer layers whose self-attention mask is the adjacency matrix.

    full_connect replaces the mask with all-ones. Every node always sees at
    least itself (mask OR identity): attention rows may not be empty, and an
    un-augmented graph can contain edge-free nodes.
    """
    n = h_g0.data.shape[0]
    if adjacency.shape != (n, n):
        raise tt.ShapeMismatch(f"adjacency {adjacency.shape} vs {n} nodes")
    if cfg.full_connect:
        mask = np.ones((n, n))
    else:
        mask = np.maximum(adjacency, np.eye(n))
    h = h_g0
    for i in range(cfg.graph_layers):
        h = _transformer_block(h, mask, params, f"graph{i}", cfg,
                               multiplicative=cfg.multiplicative_mask)
    return h


def _cross_attention(
    query: Tensor, memory: Tensor, params: ModelParams, prefix: str, cfg: ModelConfig
) -> Tensor:
    q = tt.matmul(query, params[f"{prefix}.wq"])
    k = tt.matmul(memory, params[f"{prefix}.wk"])
    v = tt.matmul(memory, params[f"{prefix}.wv"])
    return tt.multi_head_attention(q, k, v, cfg.heads, mask=None, w_out=params[f"{prefix}.wo"])


def decode_layer(
    y: Tensor,
    state: EncodedState,
    params: ModelParams,
    layer: int,
    cfg: ModelConfig,
    causal_mask: np.ndarray,
) -> Tensor:
    """One pre-norm decoder layer: causal self-attention, context
    cross-attention, then the attended state queries the graph and the
    knowledge tokens in parallel; the fused knowledge feature joins the
    residual stream before the feed-forward sublayer."""
    p = f"dec{layer}"
    normed = tt.layer_norm(y, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
    q = tt.matmul(normed, params[f"{p}.self.wq"])
    k = tt.matmul(normed, params[f"{p}.self.wk"])
    v = tt.matmul(normed, params[f"{p}.self.wv"])
    self_attn = tt.multi_head_attention(
        q, k, v, cfg.heads, mask=causal_mask, w_out=params[f"{p}.self.wo"]
    )
    a = tt.add(y, self_attn)

    a_normed = tt.layer_norm(a, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
    c = tt.add(a, _cross_attention(a_normed, state.h_c, params, f"{p}.cross", cfg))

    c_normed = tt.layer_norm(c, params[f"{p}.ln3.gain"], params[f"{p}.ln3.bias"])
    if cfg.use_graph and cfg.use_sequence:
        g = _cross_attention(c_normed, state.h_g, params, f"{p}.graph_attn", cfg)
        d = _cross_attention(c_normed, state.h_k, params, f"{p}.doc_attn", cfg)
        knowledge = tt.matmul(tt.concat([g, d], axis=1), params[f"{p}.fuse.w"])
    elif cfg.use_graph:
        knowledge = _cross_attention(c_normed, state.h_g, params, f"{p}.graph_attn", cfg)
    else:
        knowledge = _cross_attention(c_normed, state.h_k, params, f"{p}.doc_attn", cfg)
    h = tt.add(c, knowledge)

    h_normed = tt.layer_norm(h, params[f"{p}.ln4.gain"], params[f"{p}.ln4.bias"])
    ff = tt.feed_forward(
        h_normed,
        params[f"{p}.ff.w1"], params[f"{p}.ff.b1"], params[f"{p}.ff.w2"], params[f"{p}.ff.b2"],
    )
    return tt.add(h, ff)


def encode(example: TrainExample, params: ModelParams, cfg: ModelConfig) -> EncodedState:
    h_k, h_c = encode_text(example.context_ids, example.knowledge_ids, params, cfg)
    if not cfg.use_graph:
        return EncodedState(h_k=h_k, h_c=h_c, h_g=None)
    if example.graph is None or example.alignment is None:
        raise ModelError(f"example {example.example_id!r} lacks a graph but use_graph is on")
    node_order = example.graph.node_ids()
    adjacency = adjacency_matrix(example.graph, node_order)
    h_g0 = init_node_reps(h_k, example.alignment, params, node_order,
                          example.graph.supernode_id)
    h_g = graph_encode(h_g0, adjacency, params, cfg)
    return EncodedState(h_k=h_k, h_c=h_c, h_g=h_g, node_order=node_order)


def _decode_ids(
    y_in: list[int], state: EncodedState, params: ModelParams, cfg: ModelConfig
) -> Tensor:
    y = _embed(y_in, params, "dec_pos")
    causal = np.tril(np.ones((len(y_in), len(y_in))))
    for i in range(cfg.decoder_layers):
        y = decode_layer(y, state, params, i, cfg, causal)
    return tt.add(tt.matmul(y, params["out_proj.w"]), params["out_proj.b"])


def forward_example(example: TrainExample, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Teacher-forced logits, one row per target position."""
    cfg.validate()
    if not example.target_ids:
        raise ModelError(f"example {example.example_id!r} has an empty target")
    target = example.target_ids[: cfg.max_target_len]
    state = encode(example, params, cfg)
    y_in = [BOS] + target[:-1]
    return _decode_ids(y_in, state, params, cfg)


def forward(batch: list[TrainExample], params: ModelParams, cfg: ModelConfig) -> list[Tensor]:
    return [forward_example(ex, params, cfg) for ex in batch]


def generate(
    example: TrainExample,
    params: ModelParams,
    cfg: ModelConfig,
    max_len: int | None = None,
    mode: str = "greedy",
    beam_size: int = 4,
) -> list[int]:
    """Autoregressive decode from BOS until EOS or the length cap."""
    cfg.validate()
    limit = cfg.max_target_len if max_len is None else min(max_len, cfg.max_target_len)
    if limit <= 0:
        return []
    state = encode(example, params, cfg)

    def step_logprobs(y_in: list[int]) -> np.ndarray:
        logits = _decode_ids(y_in, state, params, cfg)
        row = logits.data[-1]
        row = row - row.max()
        return row - np.log(np.exp(row).sum())

    if mode == "greedy":
        y_in = [BOS]
        out: list[int] = []
        while len(out) < limit:
            nxt = int(np.argmax(step_logprobs(y_in)))
            if nxt == EOS:
                break
            out.append(nxt)
            y_in.append(nxt)
        return out
    if mode == "beam":
        beams: list[tuple[float, list[int], bool]] = [(0.0, [], False)]
        for _ in range(limit):
            candidates = []
            for score, seq, done in beams:
                if done:
                    candidates.append((score, seq, True))
                    continue
                lp = step_logprobs([BOS] + seq)
                top = np.argsort(lp)[::-1][:beam_size]
                for t in top:
                    t = int(t)
                    if t == EOS:
                        candidates.append((score + lp[t], seq, True))
                    else:
                        candidates.append((score + lp[t], seq + [t], False))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = candidates[:beam_size]
            if all(done for _, _, done in beams):
                break
        return beams[0][1]
    raise ValueError(f"unknown decode mode {mode!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, vocab: Vocab, extra=None) -> None:
    obj = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "vocab": vocab.tokens,
        "extra": extra or {},
        "params": {
            name: {
                "shape": list(p.value.shape),
                "group": p.group,
                "data": p.value.data.reshape(-1).tolist(),
            }
            for name, p in params.params.items()
        },
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelConfig, ModelParams, Vocab, dict]:
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {obj.get('version')!r}")
    cfg = ModelConfig(**obj["config"])
    skeleton = ModelParams.init(cfg, seed=0)
    saved = obj["params"]
    if set(saved) != set(skeleton.params):
        missing = set(skeleton.params) ^ set(saved)
        raise CheckpointError(f"parameter names do not match config: {sorted(missing)[:5]}")
    for name, p in skeleton.params.items():
        entry = saved[name]
        if tuple(entry["shape"]) != p.value.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {entry['shape']} != config shape {list(p.value.shape)}"
            )
        if entry["group"] != p.group:
            raise CheckpointError(f"{name}: group {entry['group']!r} != {p.group!r}")
        p.value.data = np.array(entry["data"], dtype=np.float64).reshape(p.value.shape)
    vocab = Vocab([])
    vocab.tokens = list(obj["vocab"])
    vocab.index = {t: i for i, t in enumerate(vocab.tokens)}
    return cfg, skeleton, vocab, obj.get("extra", {})
