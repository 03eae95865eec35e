import numpy as np
import pytest
import torch

from app.models import (
    AUDIO_PER_SECOND,
    FRAMES_PER_SECOND,
    FeatureDims,
    ModelConfig,
    SegmentKind,
    SequenceSegment,
    SimConfig,
    StreamSample,
    TaskAnnotations,
    TaskKind,
)
from app.services.backbone import build_model
from app.services.unit_builder import build_unit


@pytest.fixture
def dims() -> FeatureDims:
    return FeatureDims(d_v=4, d_a=3, grid_h=2, grid_w=2)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(d_model=16, n_layers=2, n_heads=2, k_layers=2)


@pytest.fixture
def tiny_model(tiny_config, dims):
    return build_model(tiny_config, dims, seed=0, dtype=torch.float64)


@pytest.fixture
def sim() -> SimConfig:
    return SimConfig(
        alert_duration_s=8,
        narration_duration_s=8,
        qa_duration_s=6,
        min_event_s=2,
        max_event_s=3,
        n_segments=3,
    )


@pytest.fixture
def make_sample(dims):
    """Build a sample with chosen annotations; features are seeded noise unless `zeros`."""

    def _make(task: TaskKind, duration_s: int, zeros: bool = False, seed: int = 0, **annotations) -> StreamSample:
        rng = np.random.default_rng(seed)
        shape_v = (duration_s, FRAMES_PER_SECOND, dims.grid_h, dims.grid_w, dims.d_v)
        shape_a = (duration_s, AUDIO_PER_SECOND, dims.d_a)
        video = np.zeros(shape_v) if zeros else rng.standard_normal(shape_v)
        audio = np.zeros(shape_a) if zeros else rng.standard_normal(shape_a)
        return StreamSample(
            sample_id=f"{task.value}-fixture-{seed}",
            task=task,
            duration_s=duration_s,
            video_frames=list(video),
            audio_features=list(audio),
            annotations=TaskAnnotations(**annotations),
        )

    return _make


@pytest.fixture
def make_unit_segment(dims):
    """Random unit segment at second `t` with `n_frames` frames and `n_audio` audio vectors."""

    def _make(rng: np.random.Generator, t: int, n_frames: int = 2, n_audio: int = 25) -> SequenceSegment:
        frames = rng.standard_normal((n_frames, dims.grid_h, dims.grid_w, dims.d_v))
        audio = rng.standard_normal((n_audio, dims.d_a))
        return SequenceSegment(kind=SegmentKind.UNIT, timestamp=t, unit=build_unit(t, frames, audio))

    return _make
