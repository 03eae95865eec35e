"""
Pack one second of features into the multimodal-unit layout and lay out
streaming training sequences (instruction, units, queries, responses).
"""

import logging
import math
from typing import List

import numpy as np

from app.errors import DataError
from app.models import (
    AUDIO_PER_SECOND,
    AUDIO_TICK_MS,
    FRAMES_PER_SECOND,
    Marker,
    Modality,
    MultimodalUnit,
    SegmentKind,
    SequenceSegment,
    StreamSample,
    TaskKind,
    UnitToken,
)
from app.services.stream_sim import instruction_tokens, label_timing

logger = logging.getLogger(__name__)


def audio_tokens_for_ms(duration_ms: int) -> int:
    """Audio token count for a (possibly partial) second: one per 40 ms tick."""
    return min(AUDIO_PER_SECOND, math.ceil(duration_ms / AUDIO_TICK_MS))


def build_unit(second_index: int, frames: np.ndarray, audio: np.ndarray) -> MultimodalUnit:
    """
    Build the unit `vision_bos audio_bos [video] [audio] audio_eos vision_eos`.

    `frames` is (n_frames, H, W, d_v) with 1-2 frames, fused by element-wise mean;
    `audio` is (n_audio, d_a) with 1-25 vectors ordered by 40 ms offset.
    """
    if isinstance(frames, (list, tuple)):
        if not frames:
            raise DataError(f"unit {second_index}: no video frames")
        if len({np.shape(f) for f in frames}) != 1:
            raise DataError(f"unit {second_index}: frame grids have mismatched shapes")
        frames = np.stack(frames)
    if isinstance(audio, (list, tuple)):
        if not audio:
            raise DataError(f"unit {second_index}: no audio vectors")
        if len({np.shape(a) for a in audio}) != 1:
            raise DataError(f"unit {second_index}: audio vectors have mismatched dimensions")
        audio = np.stack(audio)
    frames = np.asarray(frames)
    audio = np.asarray(audio)

    if frames.ndim != 4 or not 1 <= frames.shape[0] <= FRAMES_PER_SECOND:
        raise DataError(
            f"unit {second_index}: expected 1-{FRAMES_PER_SECOND} frame grids, got shape {frames.shape}"
        )
    if audio.ndim != 2 or not 1 <= audio.shape[0] <= AUDIO_PER_SECOND:
        raise DataError(
            f"unit {second_index}: expected 1-{AUDIO_PER_SECOND} audio vectors, got shape {audio.shape}"
        )

    fused = frames.mean(axis=0)
    grid_h, grid_w, _ = fused.shape

    layout = [
        UnitToken(modality=Modality.MARKER, offset=0, marker=Marker.VISION_BOS),
        UnitToken(modality=Modality.MARKER, offset=1, marker=Marker.AUDIO_BOS),
    ]
    for row in range(grid_h):
        for col in range(grid_w):
            layout.append(UnitToken(modality=Modality.VIDEO, offset=len(layout), row=row, col=col))
    for k in range(audio.shape[0]):
        layout.append(UnitToken(modality=Modality.AUDIO, offset=len(layout), audio_index=k))
    layout.append(UnitToken(modality=Modality.MARKER, offset=len(layout), marker=Marker.AUDIO_EOS))
    layout.append(UnitToken(modality=Modality.MARKER, offset=len(layout), marker=Marker.VISION_EOS))

    return MultimodalUnit(unit_index=second_index, layout=layout, video=fused, audio=audio)


def build_units(sample: StreamSample) -> List[MultimodalUnit]:
    """All units of a sample in temporal order."""
    return [build_unit(t, sample.video_frames[t], sample.audio_features[t]) for t in range(sample.duration_s)]


def build_stream_sequence(sample: StreamSample, with_responses: bool = True) -> List[SequenceSegment]:
    """
    Lay a sample out as a streaming sequence.

    Proactive tasks start with their instruction and place the reference
    response after every positive-labeled unit (multi-turn layout). Reactive QA
    places the query right after the unit covering `query_time_s`, followed by
    the answer. Responses end with the terminal marker.
    """
    ann = sample.annotations
    segments: List[SequenceSegment] = []

    if sample.task == TaskKind.REACTIVE_QA:
        if ann.query_time_s is None or not 0 <= ann.query_time_s < sample.duration_s:
            raise DataError(
                f"{sample.sample_id}: query_time_s={ann.query_time_s} outside [0, {sample.duration_s})"
            )
    else:
        segments.append(
            SequenceSegment(kind=SegmentKind.INSTRUCTION, timestamp=0, tokens=instruction_tokens(sample.task))
        )

    responses = {}
    if with_responses and sample.task == TaskKind.ALERT and ann.event_windows:
        for t, z in enumerate(label_timing(sample).z):
            if z:
                responses[t] = ann.response_tokens
    elif with_responses and sample.task == TaskKind.NARRATION:
        responses = dict(zip(ann.segment_boundaries, ann.segment_captions))

    for t in range(sample.duration_s):
        segments.append(
            SequenceSegment(
                kind=SegmentKind.UNIT,
                timestamp=t,
                unit=build_unit(t, sample.video_frames[t], sample.audio_features[t]),
            )
        )
        if sample.task == TaskKind.REACTIVE_QA and t == ann.query_time_s:
            segments.append(SequenceSegment(kind=SegmentKind.QUERY, timestamp=t, tokens=ann.query_tokens))
            if with_responses:
                segments.append(
                    SequenceSegment(
                        kind=SegmentKind.RESPONSE,
                        timestamp=t,
                        tokens=list(ann.answer_tokens) + [int(Marker.IM_END)],
                    )
                )
        elif t in responses:
            segments.append(
                SequenceSegment(
                    kind=SegmentKind.RESPONSE,
                    timestamp=t,
                    tokens=list(responses[t]) + [int(Marker.IM_END)],
                )
            )

    return segments
