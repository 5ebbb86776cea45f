"""CLI for exporting and verifying attention-weight dumps."""

from __future__ import annotations

import argparse
import sys

from weight_exporter.dumpfmt import verify_dump
from weight_exporter.export import CapabilityError, ExportJob, export_attention_dumps


def run_export(args) -> int:
    job = ExportJob(
        model=args.model,
        corpus=args.corpus,
        sequences=args.sequences,
        max_len=args.max_len,
        out_dir=args.out,
        seed=args.seed,
    )
    manifest = export_attention_dumps(job)
    print(str(manifest))
    return 0


def run_verify(args) -> int:
    report = verify_dump(args.manifest)
    for checkmark in report.checks:
        status = "PASS" if checkmark.ok else "FAIL"
        print(f"{status} {checkmark.path}" + (f" ({checkmark.detail})" if checkmark.detail else ""))
    if not report.ok:
        first = report.failures()[0]
        print(f"error: verification failed for {first.path}: {first.detail}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sus-export",
        description="Export averaged attention maps from a causal LM to ATNW dumps.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    e = subs.add_parser("export", help="run a model over a corpus and write a dump")
    e.add_argument("--model", required=True, help="model-hub id or local checkpoint path")
    e.add_argument("--corpus", required=True, help="text or jsonl(.gz) corpus path")
    e.add_argument("--sequences", type=int, required=True)
    e.add_argument("--max-len", type=int, required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=run_export)

    v = subs.add_parser("verify", help="validate an existing dump")
    v.add_argument("--manifest", required=True)
    v.set_defaults(func=run_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
