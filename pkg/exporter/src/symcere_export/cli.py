"""Command line entry point."""

from __future__ import annotations

import argparse
import json
import sys

from .embedding_io import FormatError
from .encoders import EncoderError
from .export import ExportError, export_embeddings


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symcere-export",
        description="Encode train-partition review texts into a binary embedding file.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    exp = sub.add_parser("export", help="encode one interaction file")
    exp.add_argument(
        "--interactions",
        required=True,
        help="tab-separated train file: user, item, timestamp[, review]",
    )
    exp.add_argument(
        "--encoder",
        required=True,
        help="encoder id: hashed-bag[-DIM] or hf:MODEL",
    )
    exp.add_argument("--out", required=True, help="output embedding file path")
    exp.add_argument(
        "--max-tokens",
        type=int,
        default=256,
        help="truncate each review to this many tokens (default 256)",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = export_embeddings(
            args.interactions, args.encoder, args.out, max_tokens=args.max_tokens
        )
    except (ExportError, EncoderError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        json.dumps(
            {
                "command": "export",
                "out": str(args.out),
                "count": manifest["count"],
                "dim": manifest["dim"],
                "encoder": manifest["encoder"],
                "fallback_rows": len(manifest["fallback_rows"]),
            }
        )
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
