import random

import pytest

from groundgraph.annotations import (
    AnnotatedDocument,
    CorefChain,
    Mention,
    make_sentence,
)

# ---------------------------------------------------------------------------
# Hand-annotated worked example: one dialogue utterance plus one knowledge
# sentence about spreads on bagels, with a cross-source coreference chain.
#
# context:   "I love spreading cream cheese and peanut butter ."
# knowledge: "People spread peanut butter on bagels ."
# ---------------------------------------------------------------------------


def spread_example(example_id="spread-0", response="i spread peanut butter on bagels too"):
    context = make_sentence(
        [
            ("I", "PRON", 1, "nsubj"),
            ("love", "VERB", -1, "root"),
            ("spreading", "VERB", 1, "xcomp"),
            ("cream", "NOUN", 4, "compound"),
            ("cheese", "NOUN", 2, "dobj"),
            ("and", "CCONJ", 4, "cc"),
            ("peanut", "NOUN", 7, "compound"),
            ("butter", "NOUN", 4, "conj"),
            (".", "PUNCT", 1, "punct"),
        ],
        "c.0",
    )
    knowledge = make_sentence(
        [
            ("People", "NOUN", 1, "nsubj"),
            ("spread", "VERB", -1, "root"),
            ("peanut", "NOUN", 3, "compound"),
            ("butter", "NOUN", 1, "dobj"),
            ("on", "ADP", 3, "prep"),
            ("bagels", "NOUN", 4, "pobj"),
            (".", "PUNCT", 1, "punct"),
        ],
        "k.0.0",
    )
    chain = CorefChain(
        mentions=(Mention("c.0", 6, 8), Mention("k.0.0", 2, 4)),
        canonical=0,
    )
    return AnnotatedDocument(
        example_id=example_id,
        context_sentences=(context,),
        knowledge_sentences=((knowledge,),),
        chains=(chain,),
        response=tuple(response.split()) if response else None,
    )


@pytest.fixture
def spread_doc():
    return spread_example()


# ---------------------------------------------------------------------------
# Random annotated documents. Heads form arbitrary in-range structures (one
# root per sentence, no self-heads) so the builder is stressed beyond clean
# trees.
# ---------------------------------------------------------------------------

_POS_CHOICES = (
    ["NOUN"] * 5
    + ["PROPN", "PRON", "VERB", "VERB", "ADJ", "ADV", "ADP", "ADP", "AUX", "DET", "CCONJ"]
    + ["PUNCT"]
)
_RELS = ["nsubj", "dobj", "obl", "nmod", "amod", "advmod", "prep", "pobj", "det", "cc"]
_WORDS = [f"w{i}" for i in range(40)]


def random_sentence(rng: random.Random, source: str, min_len=1, max_len=10):
    n = rng.randint(min_len, max_len)
    root = rng.randrange(n)
    words = []
    for i in range(n):
        if i == root:
            pos = rng.choice(["VERB", "NOUN", "ADJ"])
            words.append((rng.choice(_WORDS), pos, -1, "root"))
            continue
        pos = rng.choice(_POS_CHOICES)
        head = rng.choice([h for h in range(n) if h != i])
        if pos == "PUNCT":
            rel = "punct"
        elif pos == "CCONJ":
            rel = "cc"
        elif i > 0 and head == i - 1 and pos in ("NOUN", "PROPN") and rng.random() < 0.5:
            rel = rng.choice(["compound", "flat", "fixed"])
        elif rng.random() < 0.15:
            rel = "conj"
        else:
            rel = rng.choice(_RELS)
        words.append((rng.choice(_WORDS), pos, head, rel))
    return make_sentence(words, source)


def random_document(rng: random.Random, example_id: str) -> AnnotatedDocument:
    ctx = tuple(random_sentence(rng, f"c.{i}") for i in range(rng.randint(1, 3)))
    docs = tuple(
        tuple(random_sentence(rng, f"k.{d}.{i}") for i in range(rng.randint(1, 3)))
        for d in range(rng.randint(0, 2))
    )
    refs = [f"c.{i}" for i in range(len(ctx))] + [
        f"k.{d}.{i}" for d in range(len(docs)) for i in range(len(docs[d]))
    ]

    def ref_len(ref):
        parts = ref.split(".")
        sent = ctx[int(parts[1])] if parts[0] == "c" else docs[int(parts[1])][int(parts[2])]
        return len(sent.tokens)

    chains = []
    for _ in range(rng.randint(0, 3)):
        mentions = []
        for _ in range(rng.randint(2, 3)):
            ref = rng.choice(refs)
            n = ref_len(ref)
            start = rng.randrange(n)
            end = rng.randint(start + 1, min(n, start + 3))
            mentions.append(Mention(ref, start, end))
        chains.append(CorefChain(tuple(mentions), canonical=rng.randrange(len(mentions))))
    response = " ".join(rng.choice(_WORDS) for _ in range(rng.randint(1, 8)))
    return AnnotatedDocument(
        example_id=example_id,
        context_sentences=ctx,
        knowledge_sentences=docs,
        chains=tuple(chains),
        response=tuple(response.split()),
    )


def random_documents(seed: int, count: int):
    rng = random.Random(seed)
    return [random_document(rng, f"rand-{seed}-{i}") for i in range(count)]
