"""Annotation pipelines: tokenize, tag, parse, and resolve coreference.

The default "rule" pipeline is fully deterministic and dependency-free: a
regex tokenizer, a lexicon+suffix POS tagger, a heuristic head-attachment
parser that always yields one root per sentence, and a string-match
coreference resolver over noun runs. When spaCy and an English model are
installed, the "spacy" pipeline supplies tags and dependency arcs instead
(coreference still uses the string matcher; the classic neural resolver is
unmaintained and incompatible with current spaCy releases).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

RULE_PIPELINE_VERSION = "rule-1"

_TOKEN_RE = re.compile(r"[A-Za-z]+(?:'[A-Za-z]+)?|\d+(?:\.\d+)?|[^\w\s]")
_SENT_END = {".", "!", "?"}

_PRONOUNS = {
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us",
    "them", "myself", "yourself", "himself", "herself", "itself", "this",
    "that", "these", "those", "who", "what", "something", "anything",
}
_DETERMINERS = {"a", "an", "the", "my", "your", "his", "its", "our", "their",
                "some", "any", "no", "every", "each"}
_ADPOSITIONS = {"in", "on", "at", "by", "with", "from", "to", "of", "for",
                "about", "over", "under", "into", "through", "between",
                "during", "against", "around", "near", "without"}
_AUXILIARIES = {"is", "are", "was", "were", "be", "been", "being", "am",
                "do", "does", "did", "have", "has", "had", "will", "would",
                "can", "could", "shall", "should", "may", "might", "must"}
_CCONJ = {"and", "or", "but", "nor"}
_ADVERBS = {"very", "really", "quite", "too", "also", "just", "now", "then",
            "here", "there", "always", "never", "often", "not", "n't", "so"}
_COMMON_VERBS = {
    "like", "likes", "liked", "love", "loves", "loved", "eat", "eats", "ate",
    "go", "goes", "went", "know", "knows", "knew", "think", "thinks", "say",
    "says", "said", "want", "wants", "make", "makes", "made", "see", "sees",
    "saw", "get", "gets", "got", "try", "tries", "tried", "enjoy", "enjoys",
    "prefer", "prefers", "grew", "grow", "grows", "contains", "contain",
    "serve", "serves", "served", "spread", "spreads", "comes", "come",
}
_ADJ_SUFFIXES = ("ous", "ful", "ive", "able", "ible", "ic", "ish", "less")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def split_sentences(tokens: list[str]) -> list[list[str]]:
    sents: list[list[str]] = []
    current: list[str] = []
    for tok in tokens:
        current.append(tok)
        if tok in _SENT_END:
            sents.append(current)
            current = []
    if current:
        sents.append(current)
    return sents


def tag(tokens: list[str], first_in_sentence: bool = True) -> list[str]:
    tags = []
    for i, tok in enumerate(tokens):
        low = tok.lower()
        if not tok[0].isalnum():
            tags.append("PUNCT")
        elif low in _PRONOUNS:
            tags.append("PRON")
        elif low in _DETERMINERS:
            tags.append("DET")
        elif low in _ADPOSITIONS:
            tags.append("ADP")
        elif low in _AUXILIARIES:
            tags.append("AUX")
        elif low in _CCONJ:
            tags.append("CCONJ")
        elif low in _ADVERBS or low.endswith("ly"):
            tags.append("ADV")
        elif low in _COMMON_VERBS:
            tags.append("VERB")
        elif low.endswith(_ADJ_SUFFIXES):
            tags.append("ADJ")
        elif tok[0].isupper() and not (i == 0 and first_in_sentence):
            tags.append("PROPN")
        elif tok[0].isdigit():
            tags.append("OTHER")
        else:
            tags.append("NOUN")
    return tags


_NOMINAL = ("NOUN", "PROPN", "PRON")


def parse_heads(tokens: list[str], tags: list[str]) -> list[tuple[int, str]]:
    """Heuristic (head, deprel) per token; exactly one root, no self-heads.

    Prepositions attach to the nearest content word on their left and their
    object noun attaches to the preposition, giving the two-hop shape that
    downstream graph construction short-circuits. Adjacent nominals form
    compound chains, and coordination attaches the right conjunct to the
    left one with a `conj` arc.
    """
    n = len(tokens)
    root = next((i for i, t in enumerate(tags) if t == "VERB"), None)
    if root is None:
        root = next((i for i, t in enumerate(tags) if t == "AUX"), None)
    if root is None:
        root = next((i for i, t in enumerate(tags) if t in _NOMINAL), 0)

    heads: list[tuple[int, str]] = [(root, "dep")] * n

    def nearest_left(i, kinds):
        for j in range(i - 1, -1, -1):
            if tags[j] in kinds:
                return j
        return None

    def nearest_right(i, kinds):
        for j in range(i + 1, n):
            if tags[j] in kinds:
                return j
        return None

    for i in range(n):
        t = tags[i]
        if i == root:
            heads[i] = (-1, "root")
            continue
        if t == "PUNCT":
            heads[i] = (root, "punct")
        elif t in _NOMINAL:
            if i + 1 < n and tags[i + 1] in ("NOUN", "PROPN") and t in ("NOUN", "PROPN"):
                heads[i] = (i + 1, "compound")
            elif i > 0 and tags[i - 1] == "ADP":
                heads[i] = (i - 1, "pobj")
            elif i > 0 and tags[i - 1] == "CCONJ":
                left = nearest_left(i - 1, _NOMINAL)
                if left is not None:
                    heads[i] = (left, "conj")
                else:
                    heads[i] = (root, "dep")
            else:
                verb = nearest_left(i, ("VERB", "AUX"))
                if verb is not None:
                    heads[i] = (verb, "dobj")
                else:
                    heads[i] = (root, "nsubj" if i < root else "dep")
        elif t == "ADJ":
            noun = nearest_right(i, ("NOUN", "PROPN"))
            heads[i] = (noun, "amod") if noun is not None else (root, "acomp")
        elif t == "ADV":
            verb = nearest_left(i, ("VERB", "AUX")) or root
            heads[i] = (verb if verb != i else root, "advmod")
        elif t == "DET":
            noun = nearest_right(i, _NOMINAL)
            heads[i] = (noun, "det") if noun is not None else (root, "dep")
        elif t == "ADP":
            content = nearest_left(i, ("NOUN", "PROPN", "VERB"))
            heads[i] = (content, "prep") if content is not None else (root, "prep")
        elif t == "CCONJ":
            left = nearest_left(i, _NOMINAL)
            heads[i] = (left, "cc") if left is not None else (root, "cc")
        elif t in ("VERB", "AUX"):
            heads[i] = (root, "conj" if tags[i] == "VERB" else "aux")

    for i, (h, rel) in enumerate(heads):
        if rel != "root" and (h == i or not 0 <= h < n):
            heads[i] = (root if root != i else -1, rel if root != i else "root")
    return heads


@dataclass(frozen=True)
class MentionSpan:
    ref: str
    start: int
    end: int
    text: str


def noun_run_mentions(ref: str, tokens: list[str], tags: list[str]) -> list[MentionSpan]:
    """Maximal NOUN/PROPN runs, as lowercase mention candidates."""
    mentions = []
    i = 0
    while i < len(tokens):
        if tags[i] in ("NOUN", "PROPN"):
            j = i
            while j + 1 < len(tokens) and tags[j + 1] in ("NOUN", "PROPN"):
                j += 1
            mentions.append(
                MentionSpan(ref, i, j + 1, " ".join(t.lower() for t in tokens[i : j + 1]))
            )
            i = j + 1
        else:
            i += 1
    return mentions


def string_match_chains(mentions: list[MentionSpan]) -> list[dict]:
    """Group mentions sharing a head word (the run's last token) into chains;
    grouping ignores source, so chains cross context/knowledge freely. The
    first occurrence is canonical."""
    by_head: dict[str, list[MentionSpan]] = {}
    for m in mentions:
        by_head.setdefault(m.text.split()[-1], []).append(m)
    chains = []
    for head in sorted(by_head):
        group = by_head[head]
        if len(group) < 2:
            continue
        chains.append(
            {
                "mentions": [[m.ref, m.start, m.end] for m in group],
                "canonical": 0,
            }
        )
    return chains


class RulePipeline:
    """Deterministic lexicon/heuristic pipeline; no external dependencies."""

    version = RULE_PIPELINE_VERSION

    def annotate_text(self, text: str, ref_prefix: str) -> tuple[list[list[dict]], list[MentionSpan]]:
        """Sentences of token objects plus mention candidates for a text block.
        ref_prefix is the sentence-ref prefix ("c" or "k.<d>")."""
        sentences = []
        mentions = []
        for s_idx, sent_tokens in enumerate(split_sentences(tokenize(text))):
            tags = tag(sent_tokens)
            heads = parse_heads(sent_tokens, tags)
            ref = f"{ref_prefix}.{s_idx}"
            sentences.append(
                [
                    {"t": tok, "pos": pos, "head": head, "rel": rel}
                    for tok, pos, (head, rel) in zip(sent_tokens, tags, heads)
                ]
            )
            mentions.extend(noun_run_mentions(ref, sent_tokens, tags))
        return sentences, mentions


class SpacyPipeline:
    """Tags and arcs from spaCy when a model is installed; mention grouping
    stays string-based."""

    _UPOS_TO_COARSE = {
        "NOUN": "NOUN", "PROPN": "PROPN", "PRON": "PRON", "VERB": "VERB",
        "AUX": "AUX", "ADJ": "ADJ", "ADV": "ADV", "ADP": "ADP", "DET": "DET",
        "CCONJ": "CCONJ", "SCONJ": "ADP", "PUNCT": "PUNCT",
    }

    def __init__(self, model: str = "en_core_web_sm"):
        import spacy  # deferred; optional dependency

        self._nlp = spacy.load(model)
        self.version = f"spacy-{spacy.__version__}/{model}"

    def annotate_text(self, text: str, ref_prefix: str):
        doc = self._nlp(text)
        sentences = []
        mentions = []
        for s_idx, sent in enumerate(doc.sents):
            ref = f"{ref_prefix}.{s_idx}"
            toks = list(sent)
            objs = []
            tags = []
            for i, tok in enumerate(toks):
                pos = self._UPOS_TO_COARSE.get(tok.pos_, "OTHER")
                tags.append(pos)
                if tok.head == tok or tok.dep_ == "ROOT":
                    head, rel = -1, "root"
                else:
                    head, rel = tok.head.i - sent.start, tok.dep_
                objs.append({"t": tok.text, "pos": pos, "head": head, "rel": rel})
            roots = [o for o in objs if o["rel"] == "root"]
            if len(roots) != 1:  # defensive: force a single root
                for o in objs:
                    o["head"], o["rel"] = (-1, "root") if o is objs[0] else (0, "dep")
            sentences.append(objs)
            mentions.extend(noun_run_mentions(ref, [t.text for t in toks], tags))
        return sentences, mentions


def get_pipeline(name: str = "rule"):
    if name == "rule":
        return RulePipeline()
    if name == "spacy":
        return SpacyPipeline()
    raise ValueError(f"unknown pipeline {name!r}")
