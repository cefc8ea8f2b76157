"""Command-line entry point: ``embed-export --input DIR --output FILE``.

Exit codes: 0 on success, 1 when the export fails (bad input, unknown
model, dimension conflict), 2 on usage errors (argparse's convention).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .emb1 import read_emb1_header
from .exporter import ExportError, ExportJob, export_embeddings
from .models import ModelUnavailableError, available_models


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Embed every image of a dataset directory into an EMB1 file.",
    )
    parser.add_argument("--input", type=Path, required=True,
                        help="dataset directory containing manifest.json")
    parser.add_argument("--output", type=Path, required=True,
                        help="EMB1 file to write")
    parser.add_argument("--model", default="projection-16-64",
                        help="embedding model identifier, one of "
                             f"{available_models()} (default: projection-16-64)")
    parser.add_argument("--batch-size", type=int, default=32,
                        help="images embedded per batch; affects memory only "
                             "(default: 32)")
    args = parser.parse_args(argv)

    try:
        job = ExportJob(input_dir=args.input, output=args.output,
                        model=args.model, batch_size=args.batch_size)
        path = export_embeddings(job)
    except (ExportError, ModelUnavailableError, ValueError) as exc:
        print(f"embed-export: {exc}", file=sys.stderr)
        return 1
    count, dim = read_emb1_header(path)
    print(f"wrote {count} embeddings of dimension {dim} -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
