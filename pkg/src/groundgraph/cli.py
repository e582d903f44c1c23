"""Command-line driver: graph construction, training, generation, evaluation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
All file outputs are written to a temp file and atomically renamed, so a
failing command never leaves partial output behind. `G2_SEED` overrides the
configured seed wherever randomness is involved.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import kvconfig
from .annotations import AnnotationError, AnnotatedDocument, make_sentence, parse_annotation_file
from .graph import (
    BuilderConfig,
    EmptyCorpus,
    EmptyGraph,
    GraphError,
    build_ground_graph,
    export_graph,
    graph_stats,
    import_graph,
)
from .metrics import EvalPair, MetricsError, eval_report
from .model import (
    CheckpointError,
    ModelConfig,
    ModelError,
    ModelParams,
    Vocab,
    generate,
    load_checkpoint,
    save_checkpoint,
    tokenize,
)
from .tensor import NonFiniteLoss, TensorError, finite_diff_check
from .training import (
    TrainConfig,
    ablation_report,
    batch_loss,
    examples_from_documents,
    run_ablation_suite,
    train_loop,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _seed_override(seed: int) -> int:
    env = os.environ.get("G2_SEED")
    if env is None:
        return seed
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"G2_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------

_BUILDER_KEYS = {"sp", "pc", "mc", "ga", "max_nodes"}
_MODEL_KEYS = {
    "d_model", "heads", "encoder_layers", "graph_layers", "decoder_layers",
    "max_context_len", "max_knowledge_len", "max_target_len", "max_nodes",
    "use_graph", "use_sequence", "full_connect", "multiplicative_mask",
}
_TRAIN_KEYS = {
    "lr_graph", "lr_other", "batch_size", "epochs", "seed", "weight_decay",
    "clip_norm", "max_steps", "stop_loss", "log_every", "beta1", "beta2", "eps",
}
_BOOL_KEYS = {"sp", "pc", "mc", "ga", "use_graph", "use_sequence", "full_connect",
              "multiplicative_mask"}
_FLOAT_KEYS = {"lr_graph", "lr_other", "weight_decay", "clip_norm", "stop_loss",
               "beta1", "beta2", "eps"}


def load_configs(path) -> tuple[BuilderConfig, dict, TrainConfig]:
    """(builder config, model-config kwargs, train config) from a key-value
    file; vocab_size is decided later, once the corpus is known."""
    raw = kvconfig.parse_kv_file(path) if path else {}
    unknown = set(raw) - _BUILDER_KEYS - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise kvconfig.ConfigError(f"unknown config keys: {sorted(unknown)}")

    def coerce(key, value):
        if key in _BOOL_KEYS:
            return kvconfig.as_bool(value, key)
        if key in _FLOAT_KEYS:
            return kvconfig.as_float(value, key)
        return kvconfig.as_int(value, key)

    builder = BuilderConfig()
    model_kw: dict = {}
    train = TrainConfig()
    for key, value in raw.items():
        parsed = coerce(key, value)
        if key in _BUILDER_KEYS:
            builder = replace(builder, **{key: parsed})
        if key in _MODEL_KEYS:
            model_kw[key] = parsed
        if key in _TRAIN_KEYS:
            train = replace(train, **{key: parsed})
    return builder, model_kw, train


def _builder_from_flags(args, base: BuilderConfig) -> BuilderConfig:
    cfg = base
    if args.no_sp:
        cfg = replace(cfg, sp=False)
    if args.no_pc:
        cfg = replace(cfg, pc=False)
    if args.no_mc:
        cfg = replace(cfg, mc=False)
    if args.no_ga:
        cfg = replace(cfg, ga=False)
    if args.max_nodes is not None:
        cfg = replace(cfg, max_nodes=args.max_nodes)
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_build_graph(args) -> int:
    docs = parse_annotation_file(args.infile)
    builder, _, _ = load_configs(args.config)
    cfg = _builder_from_flags(args, builder)
    lines = []
    skipped = 0
    for doc in docs:
        try:
            graph, alignment = build_ground_graph(doc, cfg)
        except EmptyGraph:
            skipped += 1
            print(f"skipping degenerate record {doc.example_id!r} (empty graph)", file=sys.stderr)
            continue
        record = {
            "id": doc.example_id,
            "graph": json.loads(export_graph(graph, "json")),
            "alignment": {str(nid): list(pos) for nid, pos in alignment.items()},
        }
        lines.append(json.dumps(record, ensure_ascii=False))
    _atomic_write(args.out, "".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} graphs to {args.out} ({skipped} skipped)")
    return 0


def _read_graph_records(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def cmd_stats(args) -> int:
    records = _read_graph_records(args.infile)
    graphs = [import_graph(json.dumps(r["graph"])) for r in records]
    avg_nodes, avg_edges = graph_stats(graphs)
    print(f"graphs: {len(graphs)}")
    print(f"avg-nodes: {avg_nodes:.4f}")
    print(f"avg-edges: {avg_edges:.4f}")
    return 0


def cmd_export(args) -> int:
    records = _read_graph_records(args.infile)
    if args.id is not None:
        matches = [r for r in records if r["id"] == args.id]
        if not matches:
            raise GraphError(f"no record with id {args.id!r}")
        record = matches[0]
    else:
        if not 0 <= args.index < len(records):
            raise GraphError(f"index {args.index} out of range for {len(records)} records")
        record = records[args.index]
    graph = import_graph(json.dumps(record["graph"]))
    _atomic_write(args.out, export_graph(graph, args.format))
    print(f"exported {record['id']!r} as {args.format} to {args.out}")
    return 0


def cmd_train(args) -> int:
    builder, model_kw, train_cfg = load_configs(args.config)
    train_cfg = replace(train_cfg, seed=_seed_override(train_cfg.seed))
    docs = parse_annotation_file(args.data)
    vocab = Vocab.from_documents(docs)
    model_cfg = ModelConfig(vocab_size=len(vocab), **model_kw)
    model_cfg.validate()
    examples = examples_from_documents(docs, vocab, model_cfg, builder)
    if not examples:
        raise EmptyCorpus("no trainable examples (missing responses or empty graphs)")
    params, losses = train_loop(examples, train_cfg, model_cfg, metrics_path=args.metrics)
    extra = {"train_config": vars(train_cfg), "steps": len(losses),
             "final_loss": losses[-1] if losses else None}
    save_checkpoint(args.out, model_cfg, params, vocab, extra=extra)
    print(f"trained {len(losses)} steps on {len(examples)} examples -> {args.out}")
    if losses:
        print(f"final loss: {losses[-1]:.4f}")
    return 0


def cmd_generate(args) -> int:
    model_cfg, params, vocab, _ = load_checkpoint(args.ckpt)
    docs = parse_annotation_file(args.infile)
    lines = []
    for doc in docs:
        try:
            examples = examples_from_documents(
                [doc], vocab, model_cfg, require_response=False
            )
        except GraphError:
            examples = []
        if not examples:
            lines.append("")
            print(f"no graph for record {doc.example_id!r}; emitting empty line",
                  file=sys.stderr)
            continue
        ids = generate(examples[0], params, model_cfg, max_len=args.max_len,
                       mode=args.mode, beam_size=args.beam_size)
        lines.append(" ".join(vocab.decode(ids)))
    _atomic_write(args.out, "".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} responses to {args.out}")
    return 0


def cmd_eval(args) -> int:
    with open(args.hyp, encoding="utf-8") as f:
        hyps = [tokenize(line) for line in f.read().splitlines()]
    with open(args.ref, encoding="utf-8") as f:
        refs = [tokenize(line) for line in f.read().splitlines()]
    if len(hyps) != len(refs):
        raise MetricsError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    pairs = [EvalPair(hypothesis=h, reference=r) for h, r in zip(hyps, refs)]
    report = eval_report(pairs)
    if args.out:
        _atomic_write(args.out, report)
    print(report, end="")
    return 0


def cmd_ablate(args) -> int:
    builder, model_kw, train_cfg = load_configs(args.config)
    train_cfg = replace(train_cfg, seed=_seed_override(train_cfg.seed))
    docs = parse_annotation_file(args.data)
    vocab = Vocab.from_documents(docs)
    model_cfg = ModelConfig(vocab_size=len(vocab), **model_kw)
    rows = run_ablation_suite(docs, train_cfg, model_cfg, vocab=vocab)
    report = ablation_report(rows)
    if args.out:
        _atomic_write(args.out, report)
    print(report, end="")
    return 0


def _grad_check_fixture() -> list[AnnotatedDocument]:
    def doc(example_id, subj, verb, obj, resp):
        ctx = make_sentence([(subj, "NOUN", 1, "nsubj"), (verb, "VERB", -1, "root")], "c.0")
        know = make_sentence([(obj, "NOUN", -1, "root")], "k.0.0")
        return AnnotatedDocument(example_id, (ctx,), ((know,),), (), tuple(resp.split()))

    return [
        doc("gc-0", "cats", "sleep", "mats", "cats nap often"),
        doc("gc-1", "dogs", "bark", "yards", "dogs are loud"),
    ]


def cmd_grad_check(args) -> int:
    docs = _grad_check_fixture()
    vocab = Vocab.from_documents(docs)
    cfg = ModelConfig(
        vocab_size=len(vocab), d_model=args.d_model, heads=args.heads,
        encoder_layers=1, graph_layers=1, decoder_layers=1,
        max_context_len=8, max_knowledge_len=8, max_target_len=8, max_nodes=8,
    )
    cfg.validate()
    params = ModelParams.init(cfg, seed=_seed_override(args.seed))
    batch = examples_from_documents(docs, vocab, cfg)
    err = finite_diff_check(lambda: batch_loss(batch, params, cfg), params.all(),
                            epsilon=args.epsilon)
    print(f"max relative gradient error: {err:.3e} (tolerance {args.tolerance:g})")
    return 0 if err <= args.tolerance else 3


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="groundgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="construct graphs from an annotation file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--no-sp", action="store_true")
    p.add_argument("--no-pc", action="store_true")
    p.add_argument("--no-mc", action="store_true")
    p.add_argument("--no-ga", action="store_true")
    p.add_argument("--max-nodes", type=int, default=None)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("stats", help="average node/edge counts of a graphs file")
    p.add_argument("--in", dest="infile", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export", help="export one graph as DOT or JSON")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["dot", "json"], default="dot")
    p.add_argument("--id", default=None)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("train", help="train on an annotation file")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode responses for an annotation file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["greedy", "beam"], default="greedy")
    p.add_argument("--beam-size", type=int, default=4)
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="score a hypothesis file against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every ablation variant")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (
        AnnotationError,
        GraphError,
        MetricsError,
        ModelError,
        CheckpointError,
        TensorError,
        kvconfig.ConfigError,
        FileNotFoundError,
        json.JSONDecodeError,
        ValueError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
