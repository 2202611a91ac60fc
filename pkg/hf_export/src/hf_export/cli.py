"""Command-line entry point mirroring ExportSpec."""

from __future__ import annotations

import argparse
import sys

from .export import ExportSpec, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hf-export",
        description="Extract a soft-prompt tensor from a checkpoint into a TPVF file",
    )
    parser.add_argument("--checkpoint", required=True,
                        help="checkpoint path (.pt/.bin/.safetensors/.npz or directory) or hub id")
    parser.add_argument("--tensor", required=True, dest="tensor_name",
                        help="parameter name/path inside the checkpoint")
    parser.add_argument("--task-id", required=True)
    parser.add_argument("--out", required=True, dest="output", help="output TPVF path")
    parser.add_argument("--p-init", dest="p_init",
                        help="initialization prompt TPVF; switches output to a task prompt vector")
    parser.add_argument("--orientation", choices=("tokens_by_dim", "dim_by_tokens"),
                        help="layout of the checkpoint tensor; required when it is square")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    spec = ExportSpec(
        checkpoint=args.checkpoint,
        tensor_name=args.tensor_name,
        task_id=args.task_id,
        output=args.output,
        p_init=args.p_init,
        orientation=args.orientation,
    )
    try:
        result = export(spec)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    kind = "task prompt vector" if result.kind == 1 else "soft prompt"
    print(
        f"wrote {kind} {result.task_id!r} d={result.d} r={result.r} "
        f"to {result.path} (sha256 {result.sha256[:16]}...)"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
