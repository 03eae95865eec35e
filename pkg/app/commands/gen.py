import argparse
import logging

from app.commands.common import add_config_argument, load_config, override
from app.models import TaskKind
from app.services.stream_sim import generate_dataset
from app.storage import save_samples

logger = logging.getLogger(__name__)

TASK_CHOICES = {
    "alert": TaskKind.ALERT,
    "narration": TaskKind.NARRATION,
    "qa": TaskKind.REACTIVE_QA,
    "reactive_qa": TaskKind.REACTIVE_QA,
}


def register(subparsers):
    parser = subparsers.add_parser("gen", help="Generate synthetic labeled streams")
    parser.add_argument("--task", required=True, choices=list(TASK_CHOICES))
    parser.add_argument("--n", type=int, required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", required=True, help="Output directory, one .jsonl per sample")
    parser.add_argument("--duration", type=int, default=None, help="Stream length in seconds")
    parser.add_argument("--n-events", type=int, default=None)
    parser.add_argument("--n-segments", type=int, default=None)
    add_config_argument(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    task = TASK_CHOICES[args.task]
    duration_field = {
        TaskKind.ALERT: "alert_duration_s",
        TaskKind.NARRATION: "narration_duration_s",
        TaskKind.REACTIVE_QA: "qa_duration_s",
    }[task]
    sim = override(
        config.sim,
        n_events=args.n_events,
        n_segments=args.n_segments,
        **{duration_field: args.duration},
    )
    seed = config.seed if args.seed is None else args.seed

    samples = generate_dataset(task, args.n, seed, config.features, sim)
    save_samples(samples, args.out)
    return 0
