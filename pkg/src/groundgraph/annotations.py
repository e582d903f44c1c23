"""Annotated-dialogue file format: tokens, POS, dependency arcs, coreference.

One JSON record per line. Lines starting with '#' are comments (annotation
tools may record pipeline versions there) and are skipped. Record fields:

    id         example identifier (string)
    context    list of sentences; every sentence is a list of token objects
               {"t": surface, "pos": tag, "head": int, "rel": label}
    knowledge  list of documents, each a list of sentences (same token shape)
    coref      list of {"mentions": [[sent_ref, start, end], ...],
               "canonical": int} where sent_ref is "c.<i>" for context
               sentence i or "k.<d>.<i>" for sentence i of document d
    response   whitespace-tokenized target string (optional)

Token heads are 0-based within the sentence; the root token carries
rel == "root" and head == -1 (a self-headed root is also accepted).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

COARSE_POS = frozenset(
    ["NOUN", "PROPN", "PRON", "VERB", "AUX", "ADJ", "ADV", "ADP", "DET", "CCONJ", "PUNCT", "OTHER"]
)

ROOT_HEAD = -1


class AnnotationError(Exception):
    pass


class MalformedRecord(AnnotationError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class IndexOutOfRange(AnnotationError):
    def __init__(self, what: str):
        super().__init__(what)
        self.what = what


@dataclass(frozen=True)
class Token:
    index: int
    surface: str
    pos: str
    head: int  # 0-based within sentence, ROOT_HEAD for the root
    deprel: str


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    source: str  # sentence ref: "c.<i>" or "k.<d>.<i>"


@dataclass(frozen=True)
class Mention:
    ref: str  # sentence ref
    start: int
    end: int  # token span [start, end) within the sentence


@dataclass(frozen=True)
class CorefChain:
    mentions: tuple[Mention, ...]
    canonical: int  # index into mentions


@dataclass(frozen=True)
class AnnotatedDocument:
    example_id: str
    context_sentences: tuple[Sentence, ...]
    knowledge_sentences: tuple[tuple[Sentence, ...], ...]  # one tuple per document
    chains: tuple[CorefChain, ...] = ()
    response: tuple[str, ...] | None = None

    def sentence(self, ref: str) -> Sentence:
        """Resolve a sentence ref ("c.<i>" or "k.<d>.<i>")."""
        parts = ref.split(".")
        try:
            if parts[0] == "c" and len(parts) == 2:
                return self.context_sentences[int(parts[1])]
            if parts[0] == "k" and len(parts) == 3:
                return self.knowledge_sentences[int(parts[1])][int(parts[2])]
        except (ValueError, IndexError):
            pass
        raise IndexOutOfRange(f"unknown sentence ref {ref!r}")

    def all_sentences(self) -> list[Sentence]:
        out = list(self.context_sentences)
        for doc in self.knowledge_sentences:
            out.extend(doc)
        return out


def make_sentence(words: Iterable[tuple[str, str, int, str]], source: str) -> Sentence:
    """Build a Sentence from (surface, pos, head, deprel) tuples."""
    tokens = tuple(
        Token(index=i, surface=t, pos=pos, head=head, deprel=rel)
        for i, (t, pos, head, rel) in enumerate(words)
    )
    return Sentence(tokens=tokens, source=source)


def validate_sentence(sent: Sentence, where: str) -> None:
    n = len(sent.tokens)
    if n == 0:
        raise IndexOutOfRange(f"{where}: empty sentence")
    roots = 0
    for tok in sent.tokens:
        if tok.pos not in COARSE_POS:
            raise IndexOutOfRange(f"{where}: token {tok.index} has unknown POS {tok.pos!r}")
        if tok.deprel == "root":
            roots += 1
            if tok.head not in (ROOT_HEAD, tok.index):
                raise IndexOutOfRange(f"{where}: root token {tok.index} has head {tok.head}")
        else:
            if not 0 <= tok.head < n:
                raise IndexOutOfRange(f"{where}: token {tok.index} head {tok.head} out of range")
            if tok.head == tok.index:
                raise IndexOutOfRange(f"{where}: token {tok.index} is self-headed")
    if roots != 1:
        raise IndexOutOfRange(f"{where}: expected exactly one root, found {roots}")


def validate_document(doc: AnnotatedDocument) -> None:
    for i, sent in enumerate(doc.context_sentences):
        if sent.source != f"c.{i}":
            raise IndexOutOfRange(f"context sentence {i} carries source {sent.source!r}")
        validate_sentence(sent, f"{doc.example_id} c.{i}")
    for d, doc_sents in enumerate(doc.knowledge_sentences):
        for i, sent in enumerate(doc_sents):
            if sent.source != f"k.{d}.{i}":
                raise IndexOutOfRange(f"knowledge sentence {d}.{i} carries source {sent.source!r}")
            validate_sentence(sent, f"{doc.example_id} k.{d}.{i}")
    for ci, chain in enumerate(doc.chains):
        if not chain.mentions:
            raise IndexOutOfRange(f"chain {ci} has no mentions")
        if not 0 <= chain.canonical < len(chain.mentions):
            raise IndexOutOfRange(f"chain {ci} canonical {chain.canonical} out of range")
        for m in chain.mentions:
            sent = doc.sentence(m.ref)
            if not (0 <= m.start < m.end <= len(sent.tokens)):
                raise IndexOutOfRange(
                    f"chain {ci} mention span [{m.start}, {m.end}) out of range for {m.ref}"
                )


def _token_from_obj(obj, where: str) -> tuple[str, str, int, str]:
    if not isinstance(obj, dict):
        raise ValueError(f"{where}: token is not an object")
    try:
        t, pos, head, rel = obj["t"], obj["pos"], obj["head"], obj["rel"]
    except KeyError as e:
        raise ValueError(f"{where}: token missing field {e.args[0]!r}") from None
    if not isinstance(t, str) or not isinstance(pos, str) or not isinstance(rel, str):
        raise ValueError(f"{where}: token fields have wrong types")
    if not isinstance(head, int) or isinstance(head, bool):
        raise ValueError(f"{where}: token head is not an integer")
    return t, pos, head, rel


def _parse_record(obj: dict, line_no: int) -> AnnotatedDocument:
    if not isinstance(obj, dict):
        raise MalformedRecord(line_no, "record is not a JSON object")
    try:
        example_id = obj["id"]
        context = obj["context"]
        knowledge = obj["knowledge"]
    except KeyError as e:
        raise MalformedRecord(line_no, f"missing field {e.args[0]!r}") from None
    if not isinstance(example_id, str):
        raise MalformedRecord(line_no, "id is not a string")

    def build_sents(raw, prefix):
        sents = []
        for i, raw_sent in enumerate(raw):
            words = [_token_from_obj(t, f"{prefix}.{i}") for t in raw_sent]
            sents.append(make_sentence(words, f"{prefix}.{i}"))
        return tuple(sents)

    try:
        ctx = build_sents(context, "c")
        docs = tuple(build_sents(raw_doc, f"k.{d}") for d, raw_doc in enumerate(knowledge))
        chains = []
        for raw_chain in obj.get("coref", []):
            mentions = tuple(
                Mention(ref=str(m[0]), start=int(m[1]), end=int(m[2]))
                for m in raw_chain["mentions"]
            )
            chains.append(CorefChain(mentions=mentions, canonical=int(raw_chain["canonical"])))
        response = obj.get("response")
        resp_tokens = tuple(response.split()) if isinstance(response, str) else None
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise MalformedRecord(line_no, str(e)) from None

    doc = AnnotatedDocument(
        example_id=example_id,
        context_sentences=ctx,
        knowledge_sentences=docs,
        chains=tuple(chains),
        response=resp_tokens,
    )
    try:
        validate_document(doc)
    except IndexOutOfRange:
        raise
    return doc


def parse_annotation_file(path) -> list[AnnotatedDocument]:
    """Parse a whole annotation file; rejects the file on the first bad record."""
    docs = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}") from None
            docs.append(_parse_record(obj, line_no))
    return docs


def _token_obj(tok: Token) -> dict:
    return {"t": tok.surface, "pos": tok.pos, "head": tok.head, "rel": tok.deprel}


def document_to_record(doc: AnnotatedDocument) -> dict:
    record = {
        "id": doc.example_id,
        "context": [[_token_obj(t) for t in s.tokens] for s in doc.context_sentences],
        "knowledge": [
            [[_token_obj(t) for t in s.tokens] for s in doc_sents]
            for doc_sents in doc.knowledge_sentences
        ],
        "coref": [
            {
                "mentions": [[m.ref, m.start, m.end] for m in chain.mentions],
                "canonical": chain.canonical,
            }
            for chain in doc.chains
        ],
    }
    if doc.response is not None:
        record["response"] = " ".join(doc.response)
    return record


def write_annotation_file(docs: Iterable[AnnotatedDocument], path) -> None:
    """Serialize documents, one canonical JSON record per line (UTF-8)."""
    with open(path, "w", encoding="utf-8") as f:
        for doc in docs:
            f.write(json.dumps(document_to_record(doc), ensure_ascii=False, separators=(",", ":")))
            f.write("\n")
