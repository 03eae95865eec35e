import argparse
import logging
from pathlib import Path

from app.commands.common import add_config_argument, load_config, override
from app.config import settings
from app.errors import ConfigError, DataError
from app.models import TaskKind
from app.services.backbone import build_model
from app.services.trainer import train_mixed, train_stage1, train_stage2
from app.storage import load_checkpoint, load_samples, save_checkpoint
from app.utils.helpers import torch_dtype

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("train", help="Run one curriculum stage")
    parser.add_argument("--stage", required=True, choices=["1", "2", "mixed"])
    parser.add_argument("--data", required=True, help="Directory of generated streams")
    parser.add_argument("--out", required=True, help="Output checkpoint path")
    parser.add_argument("--init", default=None, help="Checkpoint to start from (required for stage 2)")
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lambda", dest="lam", type=float, default=None)
    parser.add_argument("--w-pos", type=float, default=None)
    parser.add_argument("--auto-w-pos", action="store_true", help="Derive w_pos from label statistics")
    parser.add_argument("--qa-mix-ratio", type=float, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--dtype", choices=["float32", "float64"], default=None)
    parser.add_argument("--freeze-encoders", action="store_true", default=None)
    parser.add_argument("--metrics", default=None, help="Metrics JSONL path (default: <out stem>.metrics.jsonl next to --out)")
    add_config_argument(parser)
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    train_config = override(
        config.train,
        steps=args.steps,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        lam=args.lam,
        w_pos=args.w_pos,
        qa_mix_ratio=args.qa_mix_ratio,
        seed=args.seed,
        dtype=args.dtype,
        freeze_encoders=args.freeze_encoders,
        stage=1 if args.stage == "1" else 2,
    )
    if args.auto_w_pos:
        train_config = train_config.model_copy(update={"w_pos": None})

    samples = load_samples(args.data)
    if not samples:
        raise DataError(f"no samples found in {args.data}")
    qa = [s for s in samples if s.task == TaskKind.REACTIVE_QA]
    proactive = [s for s in samples if s.is_proactive]

    dtype = torch_dtype(train_config.dtype)
    if args.init:
        model, info = load_checkpoint(args.init, dtype=dtype)
        stage_completed = info.stage_completed
        if (model.features.d_v, model.features.d_a) != (samples[0].feature_dims.d_v, samples[0].feature_dims.d_a):
            raise ConfigError(f"checkpoint {args.init} feature dims do not match the data in {args.data}")
    else:
        model = build_model(config.model, samples[0].feature_dims, seed=train_config.seed, dtype=dtype)
        stage_completed = 0

    out = Path(args.out)
    metrics_path = Path(args.metrics) if args.metrics else out.with_name(f"{out.stem}.{settings.METRICS_LOG_NAME}")
    if train_config.checkpoint_every and not train_config.checkpoint_dir:
        train_config = train_config.model_copy(update={"checkpoint_dir": str(out.parent)})

    if args.stage == "1":
        result = train_stage1(model, qa, train_config, metrics_path)
    elif args.stage == "2":
        result = train_stage2(model, proactive, qa, train_config, stage_completed, metrics_path)
    else:
        result = train_mixed(model, proactive, qa, train_config, metrics_path)

    save_checkpoint(out, result.model, result.stage_completed, result.config_hash)
    return 0
