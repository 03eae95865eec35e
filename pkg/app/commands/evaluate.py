import argparse
import logging

from app.commands.common import add_config_argument, load_config, override
from app.errors import ConfigError
from app.services.eval_suite import EVAL_TASKS, evaluate
from app.storage import load_samples, load_traces, save_report

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("eval", help="Score traces against annotations")
    parser.add_argument("--task", required=True, choices=list(EVAL_TASKS))
    parser.add_argument("--traces", default=None, help="Trace directory (unused by --task separability)")
    parser.add_argument("--annotations", required=True, help="Directory of the generated samples")
    parser.add_argument("--report", required=True, help="Report JSON path; a CSV table is written next to it")
    parser.add_argument("--narration-tolerance", type=int, default=None, help="Seconds after a boundary still counted as a hit")
    add_config_argument(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    sim = override(config.sim, narration_tolerance_s=args.narration_tolerance)
    samples = load_samples(args.annotations)
    if args.task != "separability" and not args.traces:
        raise ConfigError(f"--traces is required for --task {args.task}")
    traces = load_traces(args.traces) if args.traces else []
    report = evaluate(args.task, traces, samples, sim)
    save_report(report, args.report)
    for name, value in report.metrics.items():
        print(f"{name}: {value:.4f}")
    return 0
