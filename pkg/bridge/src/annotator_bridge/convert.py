"""Raw dialogue-corpus JSON -> annotation-schema records.

Raw input is a JSON array of examples shaped like:

    {
      "id": "optional string",
      "turns": [{"speaker": "...", "text": "..."}, ...],
      "knowledge": [{"title": "...", "sentences": ["...", ...]}, ...],
      "response": "optional target utterance"
    }

The last `context_window` turns become the dialogue context. A non-empty
knowledge title is prepended to its document as an extra sentence. Mentions
are collected across the whole example, so coreference chains may span the
context and any knowledge document.
"""

from __future__ import annotations

import json

from .pipeline import MentionSpan, string_match_chains, tokenize


class ConversionError(Exception):
    pass


def _shift_refs(mentions: list[MentionSpan], prefix: str, offset: int) -> list[MentionSpan]:
    out = []
    for m in mentions:
        local = int(m.ref.rsplit(".", 1)[1])
        out.append(MentionSpan(f"{prefix}.{local + offset}", m.start, m.end, m.text))
    return out


def convert_example(raw: dict, pipeline, context_window: int, index: int) -> dict:
    if not isinstance(raw, dict):
        raise ConversionError(f"example {index} is not an object")
    turns = raw.get("turns")
    if not isinstance(turns, list) or not turns:
        raise ConversionError(f"example {index} has no dialogue turns")

    context_sents: list[list[dict]] = []
    mentions: list[MentionSpan] = []
    for turn in turns[-context_window:]:
        text = turn.get("text", "") if isinstance(turn, dict) else str(turn)
        sents, turn_mentions = pipeline.annotate_text(text, "c")
        mentions.extend(_shift_refs(turn_mentions, "c", len(context_sents)))
        context_sents.extend(sents)
    if not context_sents:
        raise ConversionError(f"example {index} has an empty context window")

    knowledge: list[list[list[dict]]] = []
    for d, passage in enumerate(raw.get("knowledge", [])):
        title = (passage.get("title") or "") if isinstance(passage, dict) else ""
        sentences = passage.get("sentences", []) if isinstance(passage, dict) else [str(passage)]
        text = " ".join(([f"{title} ."] if title.strip() else []) + [str(s) for s in sentences])
        sents, doc_mentions = pipeline.annotate_text(text, f"k.{d}")
        mentions.extend(doc_mentions)
        knowledge.append(sents)

    record = {
        "id": str(raw.get("id", f"ex-{index}")),
        "context": context_sents,
        "knowledge": knowledge,
        "coref": string_match_chains(mentions),
    }
    response = raw.get("response")
    if isinstance(response, str) and response.strip():
        record["response"] = " ".join(tokenize(response))
    return record


def convert_corpus(
    raw_examples: list, pipeline, context_window: int = 3, sample: int | None = None
) -> tuple[list[str], int]:
    """JSONL record lines plus the count of skipped examples; a failing
    example is skipped with a log line rather than aborting the batch."""
    import sys

    lines = []
    skipped = 0
    subset = raw_examples if sample is None else raw_examples[:sample]
    for i, raw in enumerate(subset):
        try:
            record = convert_example(raw, pipeline, context_window, i)
        except Exception as e:  # per-record isolation by contract
            skipped += 1
            print(f"skipping example {i}: {e}", file=sys.stderr)
            continue
        lines.append(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
    return lines, skipped
