"""Phrase-level semantic graph construction over dialogue context + knowledge.

The pipeline turns an AnnotatedDocument into a typed phrase graph:

  1. per-sentence phrase merging (punctuation dropped, multiword units fused),
  2. preposition/auxiliary short-circuiting (two-hop paths become direct edges),
  3. coordination edge sharing (conjoined phrases get equal neighborhoods),
  4. coreference merging (mentions of one chain collapse into one node),
  5. augmentation (untyped leftovers removed; supernode, reversed edges and
     self-loops added).

Alongside the graph an alignment map is produced: node id -> token positions
in the concatenated encoder input [context; SEP; doc_0; SEP; doc_1; ...],
after truncation to the configured context/knowledge length caps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .annotations import AnnotatedDocument, CorefChain, Sentence

MERGE_DEPRELS = frozenset(["compound", "flat", "fixed"])
SHORTCUT_POS = ("ADP", "AUX")  # auxiliaries treated as another kind of preposition


class NodeType(str, Enum):
    N = "N"
    V = "V"
    ADJ = "ADJ"
    ADV = "ADV"
    SUPER = "SUPER"
    OTHER = "OTHER"  # transient; absent from finished graphs unless sp is ablated


POS_TO_NTYPE = {
    "NOUN": NodeType.N,
    "PROPN": NodeType.N,
    "PRON": NodeType.N,
    "VERB": NodeType.V,
    "ADJ": NodeType.ADJ,
    "ADV": NodeType.ADV,
}

# precedence when a coreference merge has to pick one type for the merged node
_NTYPE_RANK = {NodeType.N: 0, NodeType.V: 1, NodeType.ADJ: 2, NodeType.ADV: 3, NodeType.OTHER: 4}


class GraphError(Exception):
    pass


class EmptyGraph(GraphError):
    """No node survived construction; the example is degenerate."""


class UnknownNode(GraphError):
    pass


class EmptyCorpus(GraphError):
    pass


Span = tuple[str, int, int]  # (sentence ref, token start, token end)


@dataclass(frozen=True)
class PhraseNode:
    id: int
    ntype: NodeType
    surface: str
    token_spans: frozenset[Span]
    head_pos: str


@dataclass
class GroundGraph:
    """Directed phrase graph; edges are untyped (src, dst) pairs.

    edge_labels keeps the dependency relation of the originating arc as debug
    metadata; derived edges (shortcuts, shared coordination edges, closure
    edges) carry no label.
    """

    nodes: dict[int, PhraseNode] = field(default_factory=dict)
    edges: set[tuple[int, int]] = field(default_factory=set)
    edge_labels: dict[tuple[int, int], frozenset[str]] = field(default_factory=dict)
    supernode_id: int | None = None
    steps_applied: tuple[str, ...] = ()

    def copy(self) -> "GroundGraph":
        return GroundGraph(
            nodes=dict(self.nodes),
            edges=set(self.edges),
            edge_labels=dict(self.edge_labels),
            supernode_id=self.supernode_id,
            steps_applied=self.steps_applied,
        )

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def add_edge(self, src: int, dst: int, label: str | None = None) -> None:
        self.edges.add((src, dst))
        if label is not None:
            prev = self.edge_labels.get((src, dst), frozenset())
            self.edge_labels[(src, dst)] = prev | {label}

    def remove_node(self, nid: int) -> None:
        del self.nodes[nid]
        dead = [(a, b) for (a, b) in self.edges if a == nid or b == nid]
        for e in dead:
            self.edges.discard(e)
            self.edge_labels.pop(e, None)

    def in_neighbors(self, nid: int) -> set[int]:
        return {a for (a, b) in self.edges if b == nid and a != nid}

    def out_neighbors(self, nid: int) -> set[int]:
        return {b for (a, b) in self.edges if a == nid and b != nid}


@dataclass(frozen=True)
class BuilderConfig:
    sp: bool = True  # short-circuit prepositions/auxiliaries
    pc: bool = True  # parallel coordination
    mc: bool = True  # merge coreference
    ga: bool = True  # augment: supernode + reversed edges + self-loops
    max_nodes: int = 512
    max_context_len: int = 128
    max_knowledge_len: int = 896


# ---------------------------------------------------------------------------
# Concatenated-input layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InputLayout:
    """Token positions of each sentence in [context; SEP; d_0; SEP; d_1; ...].

    One separator precedes every knowledge document; separators count against
    the knowledge length cap. `kept[ref]` is the number of tokens of that
    sentence that survive truncation (prefix-kept).
    """

    offsets: dict[str, int]
    kept: dict[str, int]
    sep_positions: tuple[int, ...]
    context_length: int
    total_length: int


def input_layout(
    context_counts: list[int],
    knowledge_counts: list[list[int]],
    max_context_len: int,
    max_knowledge_len: int,
) -> InputLayout:
    offsets: dict[str, int] = {}
    kept: dict[str, int] = {}
    pos = 0
    budget = max_context_len
    for i, n in enumerate(context_counts):
        take = min(n, budget)
        offsets[f"c.{i}"] = pos
        kept[f"c.{i}"] = take
        pos += take
        budget -= take
    context_length = pos

    seps = []
    budget = max_knowledge_len
    for d, doc in enumerate(knowledge_counts):
        if budget <= 0:
            for i in range(len(doc)):
                offsets[f"k.{d}.{i}"] = pos
                kept[f"k.{d}.{i}"] = 0
            continue
        seps.append(pos)
        pos += 1
        budget -= 1
        for i, n in enumerate(doc):
            take = min(n, budget)
            offsets[f"k.{d}.{i}"] = pos
            kept[f"k.{d}.{i}"] = take
            pos += take
            budget -= take
    return InputLayout(
        offsets=offsets,
        kept=kept,
        sep_positions=tuple(seps),
        context_length=context_length,
        total_length=pos,
    )


def layout_for_document(doc: AnnotatedDocument, cfg: BuilderConfig) -> InputLayout:
    return input_layout(
        [len(s.tokens) for s in doc.context_sentences],
        [[len(s.tokens) for s in d] for d in doc.knowledge_sentences],
        cfg.max_context_len,
        cfg.max_knowledge_len,
    )


# ---------------------------------------------------------------------------
# Original graph
# ---------------------------------------------------------------------------


def merge_phrases(
    sentence: Sentence, limit: int | None = None
) -> tuple[list[PhraseNode], list[tuple[int, int, str]]]:
    """Merge one sentence into phrase nodes and labeled intra-sentence arcs.

    Punctuation is dropped. Maximal consecutive token runs connected by a
    deprel in MERGE_DEPRELS fuse into one node; the run's head token (the one
    whose head lies outside the run) sets the node type. Node ids are local,
    in token order; returned arcs are (src, dst, deprel) with src the head's
    node. `limit`, when given, ignores tokens at positions >= limit.
    """
    toks = list(sentence.tokens if limit is None else sentence.tokens[:limit])
    kept = {t.index for t in toks if t.pos != "PUNCT"}

    parent = {i: i for i in kept}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for t in toks:
        if t.index not in kept or t.deprel == "root":
            continue
        if t.deprel in MERGE_DEPRELS and t.head in kept:
            parent[find(t.index)] = find(t.head)

    groups: dict[int, list[int]] = {}
    for i in sorted(kept):
        groups.setdefault(find(i), []).append(i)

    # non-adjacent tokens never share a node: split groups at index gaps
    runs: list[list[int]] = []
    for members in groups.values():
        run = [members[0]]
        for i in members[1:]:
            if i == run[-1] + 1:
                run.append(i)
            else:
                runs.append(run)
                run = [i]
        runs.append(run)
    runs.sort(key=lambda r: r[0])

    by_index = {t.index: t for t in toks}
    node_of: dict[int, int] = {}
    nodes: list[PhraseNode] = []
    for nid, run in enumerate(runs):
        for i in run:
            node_of[i] = nid
        in_run = set(run)
        head_tok = None
        for i in run:
            t = by_index[i]
            if t.deprel == "root" or t.head not in in_run:
                head_tok = t
        if head_tok is None:  # cyclic heads inside the run; fall back to last token
            head_tok = by_index[run[-1]]
        nodes.append(
            PhraseNode(
                id=nid,
                ntype=POS_TO_NTYPE.get(head_tok.pos, NodeType.OTHER),
                surface=" ".join(by_index[i].surface for i in run),
                token_spans=frozenset([(sentence.source, run[0], run[-1] + 1)]),
                head_pos=head_tok.pos,
            )
        )

    arcs: list[tuple[int, int, str]] = []
    for t in toks:
        if t.index not in kept or t.deprel == "root":
            continue
        if t.head not in kept:
            continue  # head was punctuation or truncated away
        src, dst = node_of[t.head], node_of[t.index]
        if src != dst:
            arcs.append((src, dst, t.deprel))
    return nodes, arcs


def build_original_graph(doc: AnnotatedDocument, layout: InputLayout | None = None) -> GroundGraph:
    """Union of per-sentence phrase graphs; node ids follow sentence order."""
    g = GroundGraph()
    next_id = 0
    for sent in doc.all_sentences():
        limit = layout.kept.get(sent.source) if layout is not None else None
        if limit == 0:
            continue
        nodes, arcs = merge_phrases(sent, limit=limit)
        base = next_id
        for n in nodes:
            g.nodes[base + n.id] = replace(n, id=base + n.id)
        for src, dst, label in arcs:
            g.add_edge(base + src, base + dst, label)
        next_id += len(nodes)
    return g


# ---------------------------------------------------------------------------
# Construction steps
# ---------------------------------------------------------------------------


def short_circuit_prepositions(g: GroundGraph) -> GroundGraph:
    """Replace every two-hop path through an ADP/AUX-headed node by a direct
    edge and drop the node. Runs to fixpoint; the final edge set does not
    depend on processing order."""
    out = g.copy()
    while True:
        preps = [
            nid
            for nid in out.node_ids()
            if out.nodes[nid].head_pos in SHORTCUT_POS and nid != out.supernode_id
        ]
        if not preps:
            break
        p = preps[0]
        sources = out.in_neighbors(p)
        targets = out.out_neighbors(p)
        for a in sources:
            for b in targets:
                if a != b:
                    out.add_edge(a, b)
        out.remove_node(p)
    out.steps_applied = out.steps_applied + ("sp",)
    return out


def parallel_coordination(g: GroundGraph) -> GroundGraph:
    """Give every member of a coordination set copies of the set's external
    edges (both directions). Sets are connected components over `conj`-labeled
    edges; conjunction (CCONJ) nodes are dropped like punctuation."""
    out = g.copy()
    for nid in [n for n in out.node_ids() if out.nodes[n].head_pos == "CCONJ"]:
        out.remove_node(nid)

    parent = {nid: nid for nid in out.nodes}

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    conj_edges = [e for e in out.edges if "conj" in out.edge_labels.get(e, frozenset())]
    for a, b in conj_edges:
        parent[find(a)] = find(b)

    comps: dict[int, list[int]] = {}
    for nid in out.nodes:
        comps.setdefault(find(nid), []).append(nid)

    for members in comps.values():
        if len(members) < 2:
            continue
        group = set(members)
        ext_out = {b for (a, b) in out.edges if a in group and b not in group}
        ext_in = {a for (a, b) in out.edges if b in group and a not in group}
        for s in members:
            for b in ext_out:
                out.add_edge(s, b)
            for a in ext_in:
                out.add_edge(a, s)
    for e in conj_edges:
        if e in out.edges:
            out.edges.discard(e)
            out.edge_labels.pop(e, None)
    out.steps_applied = out.steps_applied + ("pc",)
    return out


def _mention_matches(node: PhraseNode, ref: str, start: int, end: int) -> bool:
    return any(r == ref and s < end and start < e for (r, s, e) in node.token_spans)


def merge_coreference(
    g: GroundGraph, chains: list[CorefChain] | tuple[CorefChain, ...], doc: AnnotatedDocument | None = None
) -> GroundGraph:
    """Collapse all nodes matched (by token-span overlap) to one chain into a
    single node carrying the union of spans and incident edges.

    The merged node keeps the canonical mention's text when `doc` is given;
    otherwise the surface of the best-typed matched node. Edges between merged
    members survive as self-loops so no incident edge is lost.
    """
    out = g.copy()
    for chain in chains:
        matched = sorted(
            nid
            for nid, node in out.nodes.items()
            if nid != out.supernode_id
            and any(_mention_matches(node, m.ref, m.start, m.end) for m in chain.mentions)
        )
        if len(matched) < 2:
            continue
        target = matched[0]
        members = [out.nodes[nid] for nid in matched]
        best = min(members, key=lambda n: (_NTYPE_RANK[n.ntype], n.id))

        surface = best.surface
        if doc is not None:
            m = chain.mentions[chain.canonical]
            try:
                sent = doc.sentence(m.ref)
                surface = " ".join(t.surface for t in sent.tokens[m.start : m.end])
            except Exception:
                pass  # canonical mention truncated away; keep node surface

        spans = frozenset().union(*(n.token_spans for n in members))
        merged = PhraseNode(
            id=target, ntype=best.ntype, surface=surface, token_spans=spans, head_pos=best.head_pos
        )
        rename = {nid: target for nid in matched}
        new_edges = set()
        new_labels: dict[tuple[int, int], frozenset[str]] = {}
        for a, b in out.edges:
            e = (rename.get(a, a), rename.get(b, b))
            new_edges.add(e)
            lab = out.edge_labels.get((a, b))
            if lab:
                new_labels[e] = new_labels.get(e, frozenset()) | lab
        for nid in matched[1:]:
            del out.nodes[nid]
        out.nodes[target] = merged
        out.edges = new_edges
        out.edge_labels = new_labels
    out.steps_applied = out.steps_applied + ("mc",)
    return out


def _remove_redundant(g: GroundGraph, keep_adp_aux: bool = False) -> GroundGraph:
    """Drop untyped (OTHER) nodes. With `keep_adp_aux`, preposition/auxiliary
    nodes stay: when short-circuiting is ablated they are part of the graph
    under study rather than leftovers."""
    out = g.copy()
    for nid in out.node_ids():
        node = out.nodes[nid]
        if node.ntype is not NodeType.OTHER:
            continue
        if keep_adp_aux and node.head_pos in SHORTCUT_POS:
            continue
        out.remove_node(nid)
    return out


def _add_closure(g: GroundGraph) -> GroundGraph:
    """Supernode connected both ways with every node, reversed edges, self-loops."""
    out = g.copy()
    super_id = max(out.nodes, default=-1) + 1
    out.nodes[super_id] = PhraseNode(
        id=super_id,
        ntype=NodeType.SUPER,
        surface="<super>",
        token_spans=frozenset(),
        head_pos="OTHER",
    )
    out.supernode_id = super_id
    for a, b in list(out.edges):
        out.add_edge(b, a)
    for nid in out.nodes:
        if nid != super_id:
            out.add_edge(super_id, nid)
            out.add_edge(nid, super_id)
        out.add_edge(nid, nid)
    out.steps_applied = out.steps_applied + ("ga",)
    return out


def augment_graph(g: GroundGraph) -> GroundGraph:
    """Final construction step: redundant-node removal plus graph closure."""
    out = _remove_redundant(g)
    if not out.nodes:
        raise EmptyGraph("no typed phrase node survives augmentation")
    return _add_closure(out)


# ---------------------------------------------------------------------------
# End-to-end builder
# ---------------------------------------------------------------------------

AlignmentMap = dict[int, tuple[int, ...]]


def _node_positions(node: PhraseNode, layout: InputLayout) -> tuple[int, ...]:
    positions = set()
    for ref, start, end in node.token_spans:
        off = layout.offsets.get(ref)
        if off is None:
            continue
        stop = min(end, layout.kept.get(ref, 0))
        positions.update(off + i for i in range(start, stop))
    return tuple(sorted(positions))


def build_ground_graph(
    doc: AnnotatedDocument, cfg: BuilderConfig = BuilderConfig()
) -> tuple[GroundGraph, AlignmentMap]:
    """Run the construction pipeline and compute the node -> input-position map.

    Tokens are truncated to the length caps first, then the graph is built.
    When the node cap is exceeded, knowledge nodes are evicted from the tail
    of the concatenated input backwards; context nodes are never evicted.
    """
    layout = layout_for_document(doc, cfg)
    g = build_original_graph(doc, layout)
    if cfg.sp:
        g = short_circuit_prepositions(g)
    if cfg.pc:
        g = parallel_coordination(g)
    if cfg.mc:
        g = merge_coreference(g, doc.chains, doc)
    g = _remove_redundant(g, keep_adp_aux=not cfg.sp)

    positions = {nid: _node_positions(g.nodes[nid], layout) for nid in g.node_ids()}
    for nid, pos in positions.items():
        if not pos:
            g.remove_node(nid)

    def priority(nid: int) -> tuple[int, int, int]:
        in_context = any(p < layout.context_length for p in positions[nid])
        return (0 if in_context else 1, positions[nid][0], nid)

    order = sorted(g.node_ids(), key=priority)
    for nid in order[cfg.max_nodes :]:
        g.remove_node(nid)

    if not g.nodes:
        raise EmptyGraph(f"document {doc.example_id!r} yields no graph nodes")

    if cfg.ga:
        g = _add_closure(g)

    alignment: AlignmentMap = {
        nid: positions[nid] for nid in g.node_ids() if nid != g.supernode_id
    }
    return g, alignment


# ---------------------------------------------------------------------------
# Views & export
# ---------------------------------------------------------------------------


def adjacency_matrix(g: GroundGraph, node_order: list[int]) -> np.ndarray:
    """Binary |V|x|V| matrix over the given node order; M[i][j] = 1 iff i->j."""
    known = set(g.nodes)
    for nid in node_order:
        if nid not in known:
            raise UnknownNode(f"node {nid} not in graph")
    if len(node_order) != len(known) or set(node_order) != known:
        raise UnknownNode("node_order is not a permutation of the graph's nodes")
    index = {nid: i for i, nid in enumerate(node_order)}
    m = np.zeros((len(node_order), len(node_order)), dtype=np.float64)
    for a, b in g.edges:
        m[index[a], index[b]] = 1.0
    return m


_DOT_SHAPES = {
    NodeType.N: "box",
    NodeType.V: "ellipse",
    NodeType.ADJ: "diamond",
    NodeType.ADV: "hexagon",
    NodeType.SUPER: "doublecircle",
    NodeType.OTHER: "plaintext",
}


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_graph(g: GroundGraph, fmt: str) -> str:
    fmt = fmt.lower()
    if fmt == "dot":
        lines = ["digraph ground_graph {"]
        for nid in g.node_ids():
            node = g.nodes[nid]
            label = f"{node.surface} ({node.ntype.value})"
            lines.append(f"  n{nid} [label={_dot_quote(label)}, shape={_DOT_SHAPES[node.ntype]}];")
        for a, b in sorted(g.edges):
            lines.append(f"  n{a} -> n{b};")
        lines.append("}")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        obj = {
            "nodes": [
                {
                    "id": nid,
                    "type": g.nodes[nid].ntype.value,
                    "surface": g.nodes[nid].surface,
                    "spans": [[r, s, e] for (r, s, e) in sorted(g.nodes[nid].token_spans)],
                }
                for nid in g.node_ids()
            ],
            "edges": sorted([a, b] for (a, b) in g.edges),
            "supernode": g.supernode_id,
        }
        return json.dumps(obj, ensure_ascii=False)
    raise ValueError(f"unknown export format {fmt!r}")


def import_graph(text: str) -> GroundGraph:
    """Inverse of the JSON export (head POS and arc labels are not exported)."""
    obj = json.loads(text)
    g = GroundGraph()
    for n in obj["nodes"]:
        ntype = NodeType(n["type"])
        g.nodes[n["id"]] = PhraseNode(
            id=n["id"],
            ntype=ntype,
            surface=n["surface"],
            token_spans=frozenset((r, s, e) for r, s, e in n["spans"]),
            head_pos={"N": "NOUN", "V": "VERB"}.get(ntype.value, ntype.value)
            if ntype is not NodeType.SUPER
            else "OTHER",
        )
    for a, b in obj["edges"]:
        g.add_edge(a, b)
    g.supernode_id = obj.get("supernode")
    return g


def graph_stats(corpus: list[GroundGraph]) -> tuple[float, float]:
    """(average node count, average edge count) over a corpus."""
    if not corpus:
        raise EmptyCorpus("graph_stats over an empty corpus")
    nodes = sum(len(g.nodes) for g in corpus) / len(corpus)
    edges = sum(len(g.edges) for g in corpus) / len(corpus)
    return nodes, edges
