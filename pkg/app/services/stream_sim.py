"""
Synthetic labeled audio/video feature streams for alerts, narration and reactive QA.

Every generator is a pure function of (config, seed): background features are
unit-variance noise and task events add a fixed-magnitude signature vector to
both modalities, so events are linearly detectable by construction.
"""

import logging
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.errors import DataError
from app.models import (
    AUDIO_PER_SECOND,
    FRAMES_PER_SECOND,
    FeatureDims,
    QuestionKind,
    SimConfig,
    StreamSample,
    TaskAnnotations,
    TaskKind,
    TimingLabels,
)

logger = logging.getLogger(__name__)

ALERT_PROTOTYPE = 0

# Content ids 56..63 are kept out of captions for instructions and questions.
CAPTION_VOCAB = 56
ALERT_INSTRUCTION = [60, 61]
NARRATION_INSTRUCTION = [62, 63]
QUESTION_TOKENS = {
    QuestionKind.WHICH_SIGNATURE: [56, 58],
    QuestionKind.FIRST_OF_TWO: [56, 59],
}


class SignatureBank:
    """Prototype signatures and reference captions shared by every sample of a config."""

    def __init__(self, dims: FeatureDims, sim: SimConfig):
        self.dims = dims
        self.sim = sim
        rng = np.random.default_rng(sim.signature_seed)

        self.video_dirs = self._unit_rows(rng.standard_normal((sim.n_prototypes, dims.d_v)))
        self.audio_dirs = self._unit_rows(rng.standard_normal((sim.n_prototypes, dims.d_a)))

        self.captions: List[List[int]] = []
        for _ in range(sim.n_prototypes):
            length = int(rng.integers(2, sim.caption_max_len + 1))
            tokens = rng.choice(CAPTION_VOCAB, size=length, replace=False)
            self.captions.append([int(x) for x in tokens])

    @staticmethod
    def _unit_rows(x: np.ndarray) -> np.ndarray:
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def signature(self, prototype: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Per-sample signature: jittered prototype direction rescaled to the fixed magnitude."""
        magnitude = self.sim.signature_magnitude
        jitter = self.sim.signature_jitter
        v = self.video_dirs[prototype] + jitter * rng.standard_normal(self.dims.d_v)
        a = self.audio_dirs[prototype] + jitter * rng.standard_normal(self.dims.d_a)
        return magnitude * v / np.linalg.norm(v), magnitude * a / np.linalg.norm(a)


def _background(duration_s: int, dims: FeatureDims, rng: np.random.Generator):
    video = rng.standard_normal(
        (duration_s, FRAMES_PER_SECOND, dims.grid_h, dims.grid_w, dims.d_v)
    )
    audio = rng.standard_normal((duration_s, AUDIO_PER_SECOND, dims.d_a))
    return video, audio


def _inject(video, audio, start: int, end: int, signature: Tuple[np.ndarray, np.ndarray]):
    v_sig, a_sig = signature
    video[start:end + 1] += v_sig
    audio[start:end + 1] += a_sig


def _place_windows(
    duration_s: int,
    lengths: Sequence[int],
    rng: np.random.Generator,
    gap: int = 1,
    latest_end: Optional[int] = None,
) -> List[Tuple[int, int]]:
    """Place non-overlapping windows in order with at least `gap` free seconds between them."""
    horizon = duration_s if latest_end is None else latest_end + 1
    slack = horizon - sum(lengths) - gap * (len(lengths) - 1)
    if slack < 0:
        raise DataError(
            f"cannot pack {len(lengths)} windows of lengths {list(lengths)} into {horizon}s"
        )
    offsets = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    windows = []
    cursor = 0
    for i, (length, offset) in enumerate(zip(lengths, offsets)):
        start = cursor + int(offset) if i == 0 else cursor + gap + int(offset - offsets[i - 1])
        windows.append((start, start + length - 1))
        cursor = start + length
    return windows


def _draw_lengths(n: int, sim: SimConfig, rng: np.random.Generator, budget: int, gap: int = 1) -> List[int]:
    lengths = [int(x) for x in rng.integers(sim.min_event_s, sim.max_event_s + 1, size=n)]
    if sum(lengths) + gap * (n - 1) > budget:
        lengths = [sim.min_event_s] * n
    return lengths


def _build(sample_id, task, duration_s, video, audio, annotations) -> StreamSample:
    try:
        return StreamSample(
            sample_id=sample_id,
            task=task,
            duration_s=duration_s,
            video_frames=list(video),
            audio_features=list(audio),
            annotations=annotations,
        )
    except ValidationError as e:
        raise DataError(f"generated sample {sample_id} is invalid: {e}") from e


def generate_alert_stream(
    duration_s: int,
    n_events: int,
    feature_dims: FeatureDims,
    rng_seed: int,
    sim: Optional[SimConfig] = None,
    sample_id: Optional[str] = None,
) -> StreamSample:
    """
    Generate an alert stream with `n_events` non-overlapping event windows.

    Several events model recurrence; every window carries the alert signature.
    """
    sim = sim or SimConfig()
    if duration_s < 4:
        raise DataError(f"alert streams need duration_s >= 4, got {duration_s}")
    if n_events < 1:
        raise DataError(f"n_events must be >= 1, got {n_events}")

    rng = np.random.default_rng(rng_seed)
    bank = SignatureBank(feature_dims, sim)

    lengths = _draw_lengths(n_events, sim, rng, duration_s)
    windows = _place_windows(duration_s, lengths, rng)

    video, audio = _background(duration_s, feature_dims, rng)
    signature = bank.signature(ALERT_PROTOTYPE, rng)
    for start, end in windows:
        _inject(video, audio, start, end, signature)

    annotations = TaskAnnotations(
        event_windows=windows,
        event_prototypes=[ALERT_PROTOTYPE] * n_events,
        response_tokens=bank.captions[ALERT_PROTOTYPE],
    )
    return _build(sample_id or f"alert-{rng_seed}", TaskKind.ALERT, duration_s, video, audio, annotations)


def generate_narration_stream(
    duration_s: int,
    n_segments: int,
    feature_dims: FeatureDims,
    rng_seed: int,
    sim: Optional[SimConfig] = None,
    sample_id: Optional[str] = None,
) -> StreamSample:
    """Concatenate `n_segments` regimes, each with its own signature and caption."""
    sim = sim or SimConfig()
    if n_segments < 2:
        raise DataError(f"n_segments must be >= 2, got {n_segments}")
    if n_segments > duration_s:
        raise DataError(f"n_segments ({n_segments}) exceeds duration_s ({duration_s})")

    rng = np.random.default_rng(rng_seed)
    bank = SignatureBank(feature_dims, sim)

    seg_min = max(1, min(sim.min_segment_s, duration_s // n_segments))
    slack = duration_s - n_segments * seg_min
    cuts = np.sort(rng.integers(0, slack + 1, size=n_segments - 1))
    extras = np.diff(np.concatenate([[0], cuts, [slack]]))
    lengths = [seg_min + int(x) for x in extras]

    prototypes = [int(rng.integers(1, sim.n_prototypes))]
    for _ in range(n_segments - 1):
        choices = [k for k in range(1, sim.n_prototypes) if k != prototypes[-1]]
        prototypes.append(int(rng.choice(choices)))

    video, audio = _background(duration_s, feature_dims, rng)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
    for start, length, prototype in zip(starts, lengths, prototypes):
        _inject(video, audio, int(start), int(start) + length - 1, bank.signature(prototype, rng))

    boundaries = [int(s) for s in starts[1:]]
    annotations = TaskAnnotations(
        segment_boundaries=boundaries,
        segment_prototypes=prototypes,
        segment_captions=[bank.captions[k] for k in prototypes[1:]],
    )
    return _build(
        sample_id or f"narration-{rng_seed}", TaskKind.NARRATION, duration_s, video, audio, annotations
    )


def generate_qa_stream(
    duration_s: int,
    feature_dims: FeatureDims,
    rng_seed: int,
    sim: Optional[SimConfig] = None,
    sample_id: Optional[str] = None,
    question_kind: Optional[QuestionKind] = None,
) -> StreamSample:
    """
    Generate a reactive QA stream whose query arrives strictly after its evidence.

    `which_signature` asks which regime appeared; `first_of_two` asks which of
    two regimes appeared first. The answer is the regime's caption.
    """
    sim = sim or SimConfig()
    if duration_s < 4:
        raise DataError(f"QA streams need duration_s >= 4, got {duration_s}")

    rng = np.random.default_rng(rng_seed)
    bank = SignatureBank(feature_dims, sim)
    if question_kind is None:
        question_kind = list(QuestionKind)[int(rng.integers(0, len(QuestionKind)))]

    n_events = 1 if question_kind == QuestionKind.WHICH_SIGNATURE else 2
    # Leave at least one second after the evidence for the query.
    latest_end = duration_s - 2
    lengths = _draw_lengths(n_events, sim, rng, latest_end + 1)
    windows = _place_windows(duration_s, lengths, rng, latest_end=latest_end)

    prototypes = [int(x) for x in rng.choice(np.arange(1, sim.n_prototypes), size=n_events, replace=False)]

    video, audio = _background(duration_s, feature_dims, rng)
    for (start, end), prototype in zip(windows, prototypes):
        _inject(video, audio, start, end, bank.signature(prototype, rng))

    clue_time = windows[-1][1]
    query_time = int(rng.integers(clue_time + 1, duration_s))
    annotations = TaskAnnotations(
        event_windows=windows,
        event_prototypes=prototypes,
        query_time_s=query_time,
        query_tokens=QUESTION_TOKENS[question_kind],
        question_kind=question_kind,
        answer_tokens=bank.captions[prototypes[0]],
        clue_time_s=clue_time,
    )
    return _build(sample_id or f"qa-{rng_seed}", TaskKind.REACTIVE_QA, duration_s, video, audio, annotations)


def generate_dataset(
    task: TaskKind,
    n: int,
    seed: int,
    feature_dims: FeatureDims,
    sim: Optional[SimConfig] = None,
) -> List[StreamSample]:
    """Generate `n` samples of one task with per-sample seeds spawned from `seed`."""
    sim = sim or SimConfig()
    children = np.random.SeedSequence(seed).spawn(n)
    samples = []
    for i, child in enumerate(children):
        rng_seed = int(child.generate_state(1)[0])
        sample_id = f"{task.value}-{seed}-{i:04d}"
        if task == TaskKind.ALERT:
            sample = generate_alert_stream(
                sim.alert_duration_s, sim.n_events, feature_dims, rng_seed, sim, sample_id
            )
        elif task == TaskKind.NARRATION:
            sample = generate_narration_stream(
                sim.narration_duration_s, sim.n_segments, feature_dims, rng_seed, sim, sample_id
            )
        else:
            sample = generate_qa_stream(sim.qa_duration_s, feature_dims, rng_seed, sim, sample_id)
        samples.append(sample)

    logger.info(f"Generated {n} {task.value} samples (seed={seed})")
    return samples


def instruction_tokens(task: TaskKind) -> List[int]:
    """Task instruction prepended to proactive streams."""
    if task == TaskKind.ALERT:
        return list(ALERT_INSTRUCTION)
    if task == TaskKind.NARRATION:
        return list(NARRATION_INSTRUCTION)
    return []


def label_timing(sample: StreamSample) -> TimingLabels:
    """Per-second speak labels: inside event windows (alert), at transitions (narration)."""
    ann = sample.annotations
    z = [0] * sample.duration_s

    if sample.task == TaskKind.ALERT:
        if not ann.event_windows:
            raise DataError(f"{sample.sample_id}: alert sample has no event windows")
        for start, end in ann.event_windows:
            for t in range(start, end + 1):
                z[t] = 1
    elif sample.task == TaskKind.NARRATION:
        if not ann.segment_boundaries:
            raise DataError(f"{sample.sample_id}: narration sample has no segment boundaries")
        for b in ann.segment_boundaries:
            z[b] = 1
    else:
        if ann.query_time_s is None:
            raise DataError(f"{sample.sample_id}: QA sample has no query time")

    return TimingLabels(z=z)


def compute_pos_weight(dataset: Iterable[Union[StreamSample, TimingLabels]]) -> float:
    """w_pos = N_neg / N_pos over every unit of the dataset."""
    n_pos = 0
    n_total = 0
    for item in dataset:
        labels = item if isinstance(item, TimingLabels) else label_timing(item)
        n_pos += labels.n_pos
        n_total += labels.T

    if n_pos == 0:
        raise DataError("dataset has no positive timing labels; w_pos is undefined")

    w_pos = (n_total - n_pos) / n_pos
    logger.info(f"Computed w_pos={w_pos:.4f} from {n_pos} positives over {n_total} units")
    return w_pos
