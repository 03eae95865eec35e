import argparse
import json
import logging
from pathlib import Path

from app.services.tmrope import assign_positions
from app.services.unit_builder import build_units
from app.storage import export_trace_csv, load_sample, load_trace, load_traces

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("export-trace", help="Flatten traces to t,p,s,triggered CSV rows")
    parser.add_argument("--trace", required=True, help="A trace .jsonl file or a directory of them")
    parser.add_argument("--out", required=True, help="CSV path, or a directory when --trace is a directory")
    parser.set_defaults(handler=run)

    positions = subparsers.add_parser("export-positions", help="Dump per-token (t, h, w) IDs of a sample's units")
    positions.add_argument("--stream", required=True, help="A sample .jsonl file")
    positions.add_argument("--out", required=True, help="Output .jsonl, one record per unit")
    positions.set_defaults(handler=run_positions)


def run(args: argparse.Namespace) -> int:
    source = Path(args.trace)
    if source.is_dir():
        out_dir = Path(args.out)
        for trace in load_traces(source):
            export_trace_csv(trace, out_dir / f"{trace.sample_id}.csv")
    else:
        export_trace_csv(load_trace(source), args.out)
    logger.info(f"Exported traces from {source} to {args.out}")
    return 0


def run_positions(args: argparse.Namespace) -> int:
    sample = load_sample(args.stream)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    base = 0
    with out.open("w", encoding="utf-8") as f:
        for unit in build_units(sample):
            assignment = assign_positions(unit, base)
            record = {
                "unit": unit.unit_index,
                "base_in": assignment.base_in,
                "base_out": assignment.base_out,
                "positions": [[p.t, p.h, p.w] for p in assignment.triples],
            }
            f.write(json.dumps(record) + "\n")
            base = assignment.base_out
    logger.info(f"Wrote positions of {sample.duration_s} units to {out}")
    return 0
