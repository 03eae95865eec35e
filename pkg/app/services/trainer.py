"""
Two-stage curriculum.

Stage 1 adapts the backbone to the streaming layout with the LM loss on
reactive QA streams while the speak head stays untouched. Stage 2 activates
the speak head on proactive streams with the weighted timing loss and mixes a
small share of QA samples back in for the LM term.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from app.config import settings
from app.errors import ConfigError, DataError, NumericalError
from app.models import StreamSample, TrainConfig
from app.services.backbone import PreparedSequence, StreamModel, backward, forward_full, prepare_segments
from app.services.speak_head import lm_loss, speak_logits_at, timing_loss_with_logits, total_loss
from app.services.stream_sim import compute_pos_weight, label_timing
from app.services.unit_builder import build_stream_sequence
from app.storage import save_checkpoint
from app.utils.helpers import JsonlWriter, config_hash

logger = logging.getLogger(__name__)


class StepMetrics(BaseModel):
    stage: str
    step: int
    l_time: Optional[float] = None
    l_lm: Optional[float] = None
    l_total: float
    grad_norm: float
    n_qa: int
    n_proactive: int


class TrainResult(BaseModel):
    """Trained model plus the bookkeeping a checkpoint needs."""
    model: StreamModel
    stage_completed: int
    config_hash: str
    w_pos: Optional[float] = None
    history: List[StepMetrics] = Field(default_factory=list)

    model_config = ConfigDict(arbitrary_types_allowed=True)


class _Example:
    """A sample with its parameter-independent layout and labels, computed once."""

    def __init__(self, sample: StreamSample):
        self.sample = sample
        self.prepared: PreparedSequence = prepare_segments(
            build_stream_sequence(sample), sample.feature_dims
        )
        self.z: Optional[torch.Tensor] = None
        if sample.is_proactive:
            self.z = torch.tensor(label_timing(sample).z, dtype=torch.float64)


class _BatchSampler:
    """Seeded per-epoch permutations; batches come out in a fixed order for a given seed."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._order: List[int] = []

    def take(self, k: int) -> List[int]:
        picked = []
        while len(picked) < k:
            if not self._order:
                self._order = [int(i) for i in self.rng.permutation(self.n)]
            picked.append(self._order.pop(0))
        return picked


def _set_trainable(model: StreamModel, speak_head: bool, freeze_encoders: bool):
    for p in model.parameters():
        p.requires_grad_(True)
    for p in model.speak_head.parameters():
        p.requires_grad_(speak_head)
    if freeze_encoders:
        for p in model.encoder_parameters():
            p.requires_grad_(False)


def _optimizer(model: StreamModel, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)


def _sample_time_loss(example: _Example, model: StreamModel, w_pos: float) -> torch.Tensor:
    hiddens, _ = forward_full(example.prepared, model)
    logits = speak_logits_at(hiddens, example.prepared.unit_ends, model.speak_head)
    return timing_loss_with_logits(logits, example.z.to(logits.dtype), w_pos)


def _sample_lm_loss(example: _Example, model: StreamModel) -> torch.Tensor:
    _, logits = forward_full(example.prepared, model)
    return lm_loss(logits, example.prepared.targets)


def _apply_step(
    model: StreamModel,
    optimizer: torch.optim.Optimizer,
    loss: torch.Tensor,
    config: TrainConfig,
) -> float:
    grads = backward(loss, model)
    params = dict(model.named_parameters())
    for name, grad in grads.items():
        if not torch.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for {name}")
        params[name].grad = grad

    trainable = [params[name] for name in grads]
    if config.grad_clip is not None:
        grad_norm = float(torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip))
    else:
        grad_norm = float(torch.linalg.vector_norm(torch.stack([g.norm() for g in grads.values()])))
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return grad_norm


def _metrics_writer(config: TrainConfig, metrics_path: Optional[Path]) -> JsonlWriter:
    if metrics_path is None and config.checkpoint_dir:
        metrics_path = Path(config.checkpoint_dir) / settings.METRICS_LOG_NAME
    return JsonlWriter(metrics_path)


def _maybe_checkpoint(model: StreamModel, config: TrainConfig, stage_tag: str, step: int, stage_before: int, digest: str):
    if not config.checkpoint_every or not config.checkpoint_dir or step % config.checkpoint_every:
        return
    path = Path(config.checkpoint_dir) / f"stage{stage_tag}-step{step:05d}.pt"
    save_checkpoint(path, model, stage_completed=stage_before, config_hash=digest)


def _run(
    model: StreamModel,
    stage_tag: str,
    stage_before: int,
    proactive: Sequence[_Example],
    qa: Sequence[_Example],
    config: TrainConfig,
    n_qa: int,
    w_pos: Optional[float],
    metrics_path: Optional[Path],
) -> List[StepMetrics]:
    """Shared optimisation loop: per-step mean L_time over proactive samples plus lambda * mean L_LM over QA."""
    rng = np.random.default_rng(config.seed)
    qa_sampler = _BatchSampler(len(qa), rng) if qa else None
    pro_sampler = _BatchSampler(len(proactive), rng) if proactive else None
    n_pro = config.batch_size - n_qa if proactive else 0
    optimizer = _optimizer(model, config)
    digest = config_hash(config)
    history: List[StepMetrics] = []

    model.train()
    with _metrics_writer(config, metrics_path) as writer:
        for step in range(1, config.steps + 1):
            l_time = None
            l_lm = None
            if n_pro:
                batch = [proactive[i] for i in pro_sampler.take(n_pro)]
                l_time = torch.stack([_sample_time_loss(ex, model, w_pos) for ex in batch]).mean()
            if n_qa:
                batch = [qa[i] for i in qa_sampler.take(n_qa)]
                l_lm = torch.stack([_sample_lm_loss(ex, model) for ex in batch]).mean()

            if l_time is None:
                loss = l_lm
            else:
                loss = total_loss(l_time, l_lm, config.lam)
            if not torch.isfinite(loss):
                logger.error(f"Stage {stage_tag} step {step}: loss is {loss.item()}")
                raise NumericalError(f"non-finite loss at stage {stage_tag} step {step}")

            grad_norm = _apply_step(model, optimizer, loss, config)
            metrics = StepMetrics(
                stage=stage_tag,
                step=step,
                l_time=None if l_time is None else l_time.item(),
                l_lm=None if l_lm is None else l_lm.item(),
                l_total=loss.item(),
                grad_norm=grad_norm,
                n_qa=n_qa,
                n_proactive=n_pro,
            )
            history.append(metrics)
            if step == 1 or step % config.log_every == 0 or step == config.steps:
                writer.write(metrics.model_dump())
                logger.info(
                    f"stage={stage_tag} step={step}/{config.steps} loss={metrics.l_total:.4f} "
                    f"grad_norm={grad_norm:.3f}"
                )
            _maybe_checkpoint(model, config, stage_tag, step, stage_before, digest)

    model.eval()
    return history


def _resolve_w_pos(config: TrainConfig, proactive: Sequence[StreamSample]) -> float:
    if config.w_pos is not None:
        if sum(label_timing(s).n_pos for s in proactive) == 0:
            raise DataError("proactive dataset has no positive timing labels")
        return config.w_pos
    return compute_pos_weight(proactive)


def train_stage1(
    model: StreamModel,
    qa_dataset: Sequence[StreamSample],
    config: TrainConfig,
    metrics_path: Optional[Path] = None,
) -> TrainResult:
    """LM-only adaptation on reactive QA streams; speak-head parameters are not updated."""
    if not qa_dataset:
        raise DataError("stage 1 needs a non-empty QA dataset")
    if any(s.is_proactive for s in qa_dataset):
        raise DataError("stage 1 trains on reactive QA streams only")

    _set_trainable(model, speak_head=False, freeze_encoders=config.freeze_encoders)
    examples = [_Example(s) for s in qa_dataset]
    logger.info(f"Stage 1: {len(examples)} QA streams, {config.steps} steps")
    history = _run(model, "1", 0, [], examples, config, config.batch_size, None, metrics_path)
    return TrainResult(model=model, stage_completed=1, config_hash=config_hash(config), history=history)


def train_stage2(
    model: StreamModel,
    proactive_dataset: Sequence[StreamSample],
    qa_dataset: Sequence[StreamSample],
    config: TrainConfig,
    stage_completed: int,
    metrics_path: Optional[Path] = None,
) -> TrainResult:
    """Joint timing + LM objective; requires a model that finished stage 1."""
    if stage_completed < 1:
        raise ConfigError(
            f"stage 2 needs a stage-1-complete checkpoint (stage_completed={stage_completed})"
        )
    return _train_joint(model, proactive_dataset, qa_dataset, config, "2", stage_completed, metrics_path)


def train_mixed(
    model: StreamModel,
    proactive_dataset: Sequence[StreamSample],
    qa_dataset: Sequence[StreamSample],
    config: TrainConfig,
    metrics_path: Optional[Path] = None,
) -> TrainResult:
    """Single-stage ablation: the joint objective from initialization, no stage-1 warm-up."""
    return _train_joint(model, proactive_dataset, qa_dataset, config, "mixed", 0, metrics_path)


def _train_joint(model, proactive_dataset, qa_dataset, config, stage_tag, stage_before, metrics_path) -> TrainResult:
    if not proactive_dataset:
        raise DataError(f"stage {stage_tag} needs a non-empty proactive dataset")
    if any(not s.is_proactive for s in proactive_dataset):
        raise DataError("proactive dataset contains reactive QA streams")

    w_pos = _resolve_w_pos(config, proactive_dataset)
    n_qa = int(round(config.batch_size * config.qa_mix_ratio)) if qa_dataset else 0
    if n_qa >= config.batch_size:
        n_qa = config.batch_size - 1
    if config.qa_mix_ratio > 0 and not qa_dataset:
        logger.warning(f"qa_mix_ratio={config.qa_mix_ratio} but no QA data given; LM term disabled")

    _set_trainable(model, speak_head=True, freeze_encoders=config.freeze_encoders)
    pro_examples = [_Example(s) for s in proactive_dataset]
    qa_examples = [_Example(s) for s in qa_dataset]
    logger.info(
        f"Stage {stage_tag}: {len(pro_examples)} proactive + {len(qa_examples)} QA streams, "
        f"w_pos={w_pos:.3f}, {n_qa}/{config.batch_size} QA per batch"
    )
    history = _run(model, stage_tag, stage_before, pro_examples, qa_examples, config, n_qa, w_pos, metrics_path)
    return TrainResult(
        model=model, stage_completed=2, config_hash=config_hash(config), w_pos=w_pos, history=history
    )


def heldout_timing_loss(model: StreamModel, dataset: Sequence[StreamSample], w_pos: float) -> float:
    """Mean per-sample L_time without updating anything."""
    if not dataset:
        raise DataError("held-out timing loss over an empty dataset")
    with torch.no_grad():
        losses = [float(_sample_time_loss(_Example(s), model, w_pos)) for s in dataset]
    return float(np.mean(losses))


def heldout_lm_loss(model: StreamModel, dataset: Sequence[StreamSample]) -> float:
    """Mean per-sample L_LM without updating anything."""
    if not dataset:
        raise DataError("held-out LM loss over an empty dataset")
    with torch.no_grad():
        losses = [float(_sample_lm_loss(_Example(s), model)) for s in dataset]
    return float(np.mean(losses))


def positive_rate(model: StreamModel, dataset: Sequence[StreamSample], threshold: float = 0.5) -> float:
    """Fraction of units whose raw speak probability reaches `threshold`."""
    hits = 0
    total = 0
    with torch.no_grad():
        for sample in dataset:
            example = _Example(sample)
            hiddens, _ = forward_full(example.prepared, model)
            p = torch.sigmoid(speak_logits_at(hiddens, example.prepared.unit_ends, model.speak_head))
            hits += int((p >= threshold).sum())
            total += p.numel()
    if total == 0:
        raise DataError("positive rate over an empty dataset")
    return hits / total


def parameter_checksum(module: torch.nn.Module) -> Dict[str, float]:
    """Per-parameter sums, enough to detect any update."""
    return {name: float(p.detach().double().sum()) for name, p in module.named_parameters()}
