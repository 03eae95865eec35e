import argparse
import logging
from pathlib import Path

from pydantic import ValidationError

from app.commands.common import add_config_argument, load_config, override
from app.errors import ConfigError
from app.models import TriggerPolicy
from app.services.trigger_engine import PRESETS, get_preset, run_stream
from app.storage import load_checkpoint, load_sample, load_samples, save_trace

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("infer", help="Stream samples through a checkpoint and record speak traces")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--stream", required=True, help="A sample .jsonl file or a directory of them")
    parser.add_argument("--trace-out", required=True, help="Directory for per-sample trace files")
    policy = parser.add_mutually_exclusive_group()
    policy.add_argument("--policy", default=None, help="TriggerPolicy JSON file")
    policy.add_argument("--preset", default=None, choices=sorted(PRESETS))
    parser.add_argument("--window", type=int, default=None)
    parser.add_argument("--threshold", type=float, default=None)
    parser.add_argument("--token-budget", type=int, default=None)
    parser.add_argument("--smoothing", choices=["mean", "vote"], default=None)
    parser.add_argument("--pipelined", action="store_true", help="Prefetch the next unit on a worker thread")
    parser.add_argument("--timing", action="store_true", help="Store mean encode latency in trace headers")
    add_config_argument(parser)
    parser.set_defaults(handler=run)


def resolve_policy(args: argparse.Namespace, default: TriggerPolicy) -> TriggerPolicy:
    if args.preset:
        policy = get_preset(args.preset)
    elif args.policy:
        try:
            policy = TriggerPolicy.model_validate_json(Path(args.policy).read_text(encoding="utf-8"))
        except (OSError, ValidationError) as e:
            raise ConfigError(f"invalid policy file {args.policy}: {e}") from e
    else:
        policy = default
    return override(
        policy,
        window=args.window,
        threshold=args.threshold,
        token_budget=args.token_budget,
        smoothing=args.smoothing,
    )


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    policy = resolve_policy(args, config.policy)
    model, info = load_checkpoint(args.ckpt)
    if info.stage_completed < 2:
        logger.warning(f"Checkpoint {args.ckpt} has stage_completed={info.stage_completed}; speak head is untrained")

    stream = Path(args.stream)
    samples = load_samples(stream) if stream.is_dir() else [load_sample(stream)]
    for sample in samples:
        trace = run_stream(model, sample, policy, pipelined=args.pipelined)
        save_trace(trace, args.trace_out, include_timing=args.timing)
    logger.info(f"Wrote {len(samples)} traces to {args.trace_out}")
    return 0
