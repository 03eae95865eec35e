"""
File formats: sample streams, checkpoints, session caches, traces and reports.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import ValidationError

from app.errors import ConfigError, DataError
from app.models import (
    CheckpointInfo,
    EvalReport,
    ResponseSpan,
    RunConfig,
    SpeakTrace,
    StreamSample,
    TaskAnnotations,
    TaskKind,
    TriggerPolicy,
)
from app.services.backbone import KVCache, StreamModel, build_model
from app.services.stream_sim import label_timing

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CACHE_FORMAT_VERSION = 1

PathLike = Union[str, Path]


# SAMPLES

def save_sample(sample: StreamSample, out_dir: PathLike) -> Path:
    """Write `<out_dir>/<sample_id>.jsonl`: a header line, then one line per second."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{sample.sample_id}.jsonl"
    z = label_timing(sample).z
    header = {
        "kind": "header",
        "sample_id": sample.sample_id,
        "task": sample.task.value,
        "duration_s": sample.duration_s,
        "features": sample.feature_dims.model_dump(),
        "annotations": sample.annotations.model_dump(mode="json"),
    }
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for t in range(sample.duration_s):
            record = {
                "kind": "second",
                "t": t,
                "video": sample.video_frames[t].tolist(),
                "audio": sample.audio_features[t].tolist(),
                "z": z[t],
            }
            f.write(json.dumps(record) + "\n")
    return path


def save_samples(samples: List[StreamSample], out_dir: PathLike) -> List[Path]:
    paths = [save_sample(s, out_dir) for s in samples]
    logger.info(f"Wrote {len(paths)} samples to {out_dir}")
    return paths


def load_sample(path: PathLike) -> StreamSample:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
        header = json.loads(lines[0])
        if header.get("kind") != "header":
            raise DataError(f"{path}: first record is not a header")
        seconds = sorted((json.loads(line) for line in lines[1:] if line.strip()), key=lambda r: r["t"])
        return StreamSample(
            sample_id=header["sample_id"],
            task=TaskKind(header["task"]),
            duration_s=header["duration_s"],
            video_frames=[np.asarray(r["video"], dtype=np.float64) for r in seconds],
            audio_features=[np.asarray(r["audio"], dtype=np.float64) for r in seconds],
            annotations=TaskAnnotations(**header["annotations"]),
        )
    except (OSError, IndexError, KeyError, ValueError, ValidationError) as e:
        if isinstance(e, DataError):
            raise
        logger.error(f"Failed to load sample {path}: {str(e)}")
        raise DataError(f"malformed sample file {path}: {e}") from e


def load_samples(data_dir: PathLike, task: Optional[TaskKind] = None) -> List[StreamSample]:
    """Every `*.jsonl` sample in a directory, sorted by file name, optionally filtered by task."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    samples = [load_sample(p) for p in sorted(data_dir.glob("*.jsonl"))]
    if task is not None:
        samples = [s for s in samples if s.task == task]
    logger.info(f"Loaded {len(samples)} samples from {data_dir}")
    return samples


# CHECKPOINTS

def parameter_manifest(model: StreamModel) -> Dict[str, List[int]]:
    return {name: list(t.shape) for name, t in model.state_dict().items()}


def save_checkpoint(
    path: PathLike,
    model: StreamModel,
    stage_completed: int,
    config_hash: Optional[str] = None,
) -> CheckpointInfo:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    info = CheckpointInfo(
        format_version=CHECKPOINT_FORMAT_VERSION,
        stage_completed=stage_completed,
        config_hash=config_hash,
        model=model.config,
        features=model.features,
        manifest=parameter_manifest(model),
    )
    torch.save({"info": info.model_dump(mode="json"), "state_dict": model.state_dict()}, path)
    logger.info(f"Saved checkpoint {path} (stage_completed={stage_completed})")
    return info


def load_checkpoint(path: PathLike, dtype: Optional[torch.dtype] = None) -> Tuple[StreamModel, CheckpointInfo]:
    """Rebuild the model from the stored config and verify the parameter manifest."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        info = CheckpointInfo(**payload["info"])
    except (OSError, KeyError, TypeError, ValidationError, RuntimeError) as e:
        logger.error(f"Failed to read checkpoint {path}: {str(e)}")
        raise ConfigError(f"unreadable checkpoint {path}: {e}") from e

    if info.format_version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"checkpoint {path} has format_version {info.format_version}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )

    state_dict = payload["state_dict"]
    stored_dtype = next(iter(state_dict.values())).dtype
    model = build_model(info.model, info.features, dtype=dtype or stored_dtype)
    expected = parameter_manifest(model)
    if expected != info.manifest:
        mismatched = sorted(
            name for name in set(expected) | set(info.manifest) if expected.get(name) != info.manifest.get(name)
        )[:3]
        raise ConfigError(f"checkpoint {path} does not match its config: {mismatched}")
    model.load_state_dict({k: v.to(model.dtype) for k, v in state_dict.items()})
    return model, info


# SESSION CACHES

def save_cache(path: PathLike, cache: KVCache, base: int):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": CACHE_FORMAT_VERSION, "cache": cache.state_dict(), "base": base}, path)


def load_cache(path: PathLike) -> Tuple[KVCache, int]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CACHE_FORMAT_VERSION:
        raise ConfigError(f"cache {path} has unsupported format_version {payload.get('format_version')}")
    return KVCache.from_state_dict(payload["cache"]), int(payload["base"])


# TRACES

def save_trace(trace: SpeakTrace, out_dir: PathLike, include_timing: bool = False) -> Path:
    """Header line plus one line per unit. Wall-clock timing is opt-in so reruns stay byte-identical."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{trace.sample_id}.jsonl"
    header = {
        "kind": "trace",
        "sample_id": trace.sample_id,
        "task": trace.task.value,
        "policy": trace.policy.model_dump(mode="json"),
        "responses": [r.model_dump() for r in trace.responses],
    }
    if include_timing:
        header["mean_encode_ms"] = trace.mean_encode_ms
    with path.open("w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for t, (p, s, fired) in enumerate(zip(trace.p, trace.s, trace.triggered)):
            tokens = trace.unit_tokens[t] if t < len(trace.unit_tokens) else []
            f.write(json.dumps({"t": t, "p": p, "s": s, "triggered": fired, "tokens": tokens}) + "\n")
    return path


def load_trace(path: PathLike) -> SpeakTrace:
    path = Path(path)
    try:
        lines = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        header, units = lines[0], sorted(lines[1:], key=lambda r: r["t"])
        if header.get("kind") != "trace":
            raise DataError(f"{path}: first record is not a trace header")
        return SpeakTrace(
            sample_id=header["sample_id"],
            task=TaskKind(header["task"]),
            policy=TriggerPolicy(**header["policy"]),
            p=[u["p"] for u in units],
            s=[u["s"] for u in units],
            triggered=[u["triggered"] for u in units],
            unit_tokens=[u.get("tokens", []) for u in units],
            responses=[ResponseSpan(**r) for r in header.get("responses", [])],
            mean_encode_ms=header.get("mean_encode_ms"),
        )
    except (OSError, IndexError, KeyError, ValueError, ValidationError) as e:
        if isinstance(e, DataError):
            raise
        logger.error(f"Failed to load trace {path}: {str(e)}")
        raise DataError(f"malformed trace file {path}: {e}") from e


def load_traces(trace_dir: PathLike) -> List[SpeakTrace]:
    trace_dir = Path(trace_dir)
    if not trace_dir.is_dir():
        raise DataError(f"trace directory {trace_dir} does not exist")
    return [load_trace(p) for p in sorted(trace_dir.glob("*.jsonl"))]


def export_trace_csv(trace: SpeakTrace, path: PathLike) -> Path:
    """Flatten a trace to `t,p,s,triggered` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["t", "p", "s", "triggered"])
        writer.writeheader()
        for t, (p, s, fired) in enumerate(zip(trace.p, trace.s, trace.triggered)):
            writer.writerow({"t": t, "p": repr(p), "s": repr(s), "triggered": int(fired)})
    return path


# REPORTS

def save_report(report: EvalReport, path: PathLike) -> Tuple[Path, Path]:
    """Write the report JSON and a per-sample CSV table next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")

    table = path.with_suffix(".csv")
    fieldnames: List[str] = []
    for row in report.per_sample:
        fieldnames.extend(k for k in row if k not in fieldnames)
    with table.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames or ["sample_id"])
        writer.writeheader()
        for row in report.per_sample:
            writer.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in row.items()})
    logger.info(f"Wrote report {path} and table {table}")
    return path, table


def load_report(path: PathLike) -> EvalReport:
    return EvalReport.model_validate_json(Path(path).read_text(encoding="utf-8"))


def load_run_config(path: Optional[PathLike]) -> RunConfig:
    """Parse a RunConfig JSON file; a missing path yields the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        return RunConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e
