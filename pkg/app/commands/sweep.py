"""
Sensitivity sweeps: training-time w_pos and inference-time threshold/window.
"""

import argparse
import csv
import json
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.commands.common import add_config_argument, load_config, override, parse_list
from app.errors import ConfigError, DataError
from app.models import RunConfig, SimConfig, StreamSample, TaskKind
from app.services.backbone import build_model
from app.services.eval_suite import EVAL_TASKS, evaluate
from app.services.trainer import heldout_timing_loss, positive_rate, train_stage1, train_stage2
from app.services.trigger_engine import replay_trace
from app.storage import load_samples, load_traces
from app.utils.helpers import configure_torch, torch_dtype

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("sweep", help="Sensitivity sweeps over w_pos or threshold/window")
    parser.add_argument("--grid", choices=["w_pos", "threshold"], default="w_pos")
    parser.add_argument("--out", required=True, help="Output directory for the sweep table and summary")
    parser.add_argument("--data", default=None, help="[w_pos] training streams")
    parser.add_argument("--eval-data", default=None, help="[w_pos] held-out proactive streams")
    parser.add_argument("--values", default="1,3,9", help="[w_pos] comma-separated w_pos values")
    parser.add_argument("--seeds", default="0,1,2", help="[w_pos] comma-separated seeds")
    parser.add_argument("--workers", type=int, default=1, help="[w_pos] concurrent runs")
    parser.add_argument("--traces", default=None, help="[threshold] stored trace directory")
    parser.add_argument("--annotations", default=None, help="[threshold] sample directory")
    parser.add_argument("--task", default="alert", choices=[t for t in EVAL_TASKS if t != "separability"])
    parser.add_argument("--thresholds", default="0.3,0.4,0.5,0.6,0.7")
    parser.add_argument("--windows", default="1,2,3,4,5")
    add_config_argument(parser)
    parser.set_defaults(handler=run)


def _w_pos_point(job) -> Dict[str, float]:
    """One (w_pos, seed) run: stage 1, stage 2, then rates on the held-out set."""
    config_json, train_samples, eval_samples, w_pos, seed = job
    configure_torch()
    config = RunConfig.model_validate_json(config_json)
    train_config = config.train.model_copy(update={"seed": seed, "w_pos": w_pos, "checkpoint_every": 0})

    qa = [s for s in train_samples if s.task == TaskKind.REACTIVE_QA]
    proactive = [s for s in train_samples if s.is_proactive]
    model = build_model(
        config.model, train_samples[0].feature_dims, seed=seed, dtype=torch_dtype(train_config.dtype)
    )
    stage1 = train_stage1(model, qa, train_config)
    stage2 = train_stage2(stage1.model, proactive, qa, train_config, stage1.stage_completed)
    return {
        "w_pos": w_pos,
        "seed": seed,
        "positive_rate": positive_rate(stage2.model, eval_samples, threshold=0.5),
        "heldout_l_time": heldout_timing_loss(stage2.model, eval_samples, w_pos),
    }


def sweep_w_pos(
    train_samples: Sequence[StreamSample],
    eval_samples: Sequence[StreamSample],
    config: RunConfig,
    values: Sequence[float],
    seeds: Sequence[int],
    workers: int = 1,
) -> List[Dict[str, float]]:
    """Positive-prediction rate at threshold 0.5 per (w_pos, seed); runs are independent."""
    if not train_samples or not eval_samples:
        raise DataError("w_pos sweep needs training and held-out samples")
    eval_samples = [s for s in eval_samples if s.is_proactive]
    config_json = config.model_dump_json(by_alias=True)
    jobs = [(config_json, list(train_samples), eval_samples, w, s) for w in values for s in seeds]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_w_pos_point, jobs))
    else:
        rows = [_w_pos_point(job) for job in jobs]
    return sorted(rows, key=lambda r: (r["w_pos"], r["seed"]))


def summarize_w_pos(rows: Sequence[Dict[str, float]]) -> Dict[str, float]:
    """Mean positive rate per w_pos value, keyed by the value as text."""
    grouped = defaultdict(list)
    for row in rows:
        grouped[row["w_pos"]].append(row["positive_rate"])
    return {repr(w): float(np.mean(rates)) for w, rates in sorted(grouped.items())}


def sweep_threshold(
    traces,
    samples: Sequence[StreamSample],
    task: str,
    thresholds: Sequence[float],
    windows: Sequence[int],
    sim: Optional[SimConfig] = None,
) -> List[Dict[str, float]]:
    """Re-score stored traces over a threshold x window grid without new inference."""
    rows = []
    for window in windows:
        for threshold in thresholds:
            replayed = []
            for trace in traces:
                policy = override(trace.policy, window=window, threshold=threshold)
                replayed.append(replay_trace(trace, policy))
            report = evaluate(task, replayed, samples, sim)
            rows.append({"window": window, "threshold": threshold, **report.metrics})
    return rows


def _write_table(rows: List[Dict], path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def run(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.grid == "w_pos":
        if not args.data or not args.eval_data:
            raise ConfigError("--grid w_pos needs --data and --eval-data")
        config = load_config(args)
        rows = sweep_w_pos(
            load_samples(args.data),
            load_samples(args.eval_data),
            config,
            parse_list(args.values, float),
            parse_list(args.seeds, int),
            args.workers,
        )
        summary = summarize_w_pos(rows)
        _write_table(rows, out / "sweep_w_pos.csv")
        (out / "sweep_w_pos.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        logger.info(f"w_pos sweep mean positive rates: {summary}")
    else:
        if not args.traces or not args.annotations:
            raise ConfigError("--grid threshold needs --traces and --annotations")
        rows = sweep_threshold(
            load_traces(args.traces),
            load_samples(args.annotations),
            args.task,
            parse_list(args.thresholds, float),
            parse_list(args.windows, int),
            load_config(args).sim,
        )
        _write_table(rows, out / f"sweep_threshold_{args.task}.csv")
        logger.info(f"Threshold sweep wrote {len(rows)} grid points")
    return 0
