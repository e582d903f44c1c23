"""annotate: raw dialogue JSON -> annotation JSONL for the graph pipeline."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .convert import convert_corpus
from .pipeline import get_pipeline


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="annotate", description=__doc__)
    parser.add_argument("--in", dest="infile", required=True, help="raw corpus JSON")
    parser.add_argument("--out", required=True, help="annotation JSONL to write")
    parser.add_argument("--window", type=int, default=3,
                        help="dialogue turns kept as context (default 3)")
    parser.add_argument("--sample", type=int, default=None,
                        help="annotate only the first N examples")
    parser.add_argument("--pipeline", default="rule", choices=["rule", "spacy"])
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 1
    if args.window < 1:
        print("error: --window must be >= 1", file=sys.stderr)
        return 1

    try:
        with open(args.infile, encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, list):
            raise ValueError("raw corpus must be a JSON array of examples")
        pipeline = get_pipeline(args.pipeline)
    except (OSError, ValueError, ImportError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    lines, skipped = convert_corpus(raw, pipeline, context_window=args.window,
                                    sample=args.sample)
    header = (f"# annotator-bridge={__version__} pipeline={pipeline.version} "
              f"window={args.window}")
    tmp = f"{args.out}.tmp.{os.getpid()}"
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(header + "\n")
            for line in lines:
                f.write(line + "\n")
        os.replace(tmp, args.out)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    print(f"annotated {len(lines)} records ({skipped} skipped) -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
