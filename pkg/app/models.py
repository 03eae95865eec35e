from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any, Tuple
from enum import Enum, IntEnum

import numpy as np

from app.config import settings


# VOCABULARY

CONTENT_VOCAB = 64

FRAMES_PER_SECOND = 2
AUDIO_PER_SECOND = 25
AUDIO_TICK_MS = 40


class Marker(IntEnum):
    """Special tokens, placed after the content vocabulary in the token table."""
    VISION_BOS = CONTENT_VOCAB
    AUDIO_BOS = CONTENT_VOCAB + 1
    AUDIO_EOS = CONTENT_VOCAB + 2
    VISION_EOS = CONTENT_VOCAB + 3
    QUERY_BOS = CONTENT_VOCAB + 4
    QUERY_EOS = CONTENT_VOCAB + 5
    EOT = CONTENT_VOCAB + 6  # unfinished utterance, continues next unit
    IM_END = CONTENT_VOCAB + 7  # terminal


TOKEN_TABLE_SIZE = CONTENT_VOCAB + len(Marker)


# ENUMS

class TaskKind(str, Enum):
    """Synthetic stream task."""
    ALERT = "alert"
    NARRATION = "narration"
    REACTIVE_QA = "reactive_qa"


class QuestionKind(str, Enum):
    """Queried property of a reactive QA stream."""
    WHICH_SIGNATURE = "which_signature"
    FIRST_OF_TWO = "first_of_two"


class Modality(str, Enum):
    """Token modality inside a multimodal unit."""
    MARKER = "marker"
    VIDEO = "video"
    AUDIO = "audio"


class SegmentKind(str, Enum):
    """Kind of a segment in a streaming training sequence."""
    INSTRUCTION = "instruction"
    UNIT = "unit"
    QUERY = "query"
    RESPONSE = "response"


class TriggerMode(str, Enum):
    """Trigger state-machine mode."""
    ALERT_ONCE = "alert_once"
    ALERT_RECURRING = "alert_recurring"
    NARRATION = "narration"
    STATIC_SCORING = "static_scoring"


class Smoothing(str, Enum):
    """Sliding-window aggregation of speak probabilities."""
    MEAN = "mean"
    VOTE = "vote"


class Decision(str, Enum):
    STAY_SILENT = "stay_silent"
    TRIGGER = "trigger"


# CONFIG MODELS

class FeatureDims(BaseModel):
    """Pre-featurized input shapes."""
    d_v: int = Field(16, ge=1)
    d_a: int = Field(8, ge=1)
    grid_h: int = Field(2, ge=1)
    grid_w: int = Field(2, ge=1)


class SimConfig(BaseModel):
    """Synthetic stream generation settings."""
    signature_magnitude: float = Field(2.0, gt=0)
    signature_jitter: float = Field(0.1, ge=0)
    signature_seed: int = 1234
    n_prototypes: int = Field(8, ge=3)
    min_event_s: int = Field(3, ge=1)
    max_event_s: int = Field(6, ge=1)
    min_segment_s: int = Field(2, ge=1)
    caption_max_len: int = Field(8, ge=2, le=8)
    narration_tolerance_s: int = Field(1, ge=0)
    alert_duration_s: int = Field(30, ge=4)
    narration_duration_s: int = Field(30, ge=2)
    qa_duration_s: int = Field(12, ge=4)
    n_events: int = Field(1, ge=1)
    n_segments: int = Field(4, ge=2)

    @model_validator(mode="after")
    def check_event_range(self):
        if self.max_event_s < self.min_event_s:
            raise ValueError("max_event_s must be >= min_event_s")
        return self


class ModelConfig(BaseModel):
    """Backbone and speak-head shapes."""
    d_model: int = Field(64, ge=2)
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    k_layers: int = Field(4, ge=1)
    d_ff: Optional[int] = Field(None, ge=1)
    d_hidden: Optional[int] = Field(None, ge=1)
    theta_base: float = Field(10000.0, gt=1.0)
    partition: Optional[Tuple[int, int, int]] = None

    @model_validator(mode="after")
    def check_shapes(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim = d_model / n_heads must be even, got {self.head_dim}")
        if self.k_layers > self.n_layers:
            raise ValueError(
                f"K (k_layers={self.k_layers}) must be <= n_layers ({self.n_layers})"
            )
        if self.partition is not None:
            if any(n < 0 for n in self.partition) or sum(self.partition) != self.head_dim // 2:
                raise ValueError(
                    f"rotary partition {self.partition} must be non-negative and sum to "
                    f"head_dim/2 = {self.head_dim // 2}"
                )
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    @property
    def speak_hidden(self) -> int:
        return self.d_hidden or self.d_model

    @property
    def rotary_partition(self) -> Tuple[int, int, int]:
        """Channel-pair split (n_t, n_h, n_w), proportional to (2, 1, 1) by default."""
        if self.partition is not None:
            return self.partition
        pairs = self.head_dim // 2
        n_spatial = pairs // 4
        return (pairs - 2 * n_spatial, n_spatial, n_spatial)


class TriggerPolicy(BaseModel):
    """Inference-time triggering policy."""
    window: int = Field(3, ge=1)
    threshold: float = Field(0.5, gt=0.0, lt=1.0)
    token_budget: int = Field(25, ge=1)
    cooldown_units: int = Field(2, ge=0)
    mode: TriggerMode = TriggerMode.ALERT_ONCE
    smoothing: Smoothing = Smoothing.MEAN


class TrainConfig(BaseModel):
    """Two-stage curriculum settings."""
    stage: int = Field(1, ge=1, le=2)
    learning_rate: float = Field(3e-4, gt=0)
    steps: int = Field(200, gt=0)
    batch_size: int = Field(8, gt=0)
    lam: float = Field(0.5, ge=0, alias="lambda")
    w_pos: Optional[float] = Field(3.0, ge=0)
    qa_mix_ratio: float = Field(0.2, ge=0.0, le=1.0)
    seed: int = 0
    weight_decay: float = Field(0.01, ge=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    freeze_encoders: bool = False
    log_every: int = Field(10, gt=0)
    checkpoint_every: int = Field(0, ge=0)
    dtype: str = "float32"
    checkpoint_dir: Optional[str] = None

    model_config = ConfigDict(populate_by_name=True)

    @field_validator("dtype")
    def validate_dtype(cls, v):
        allowed = ["float32", "float64"]
        if v not in allowed:
            raise ValueError(f"dtype must be one of {allowed}")
        return v


class RunConfig(BaseModel):
    """One JSON document configuring every subcommand."""
    model: ModelConfig = Field(default_factory=ModelConfig)
    features: FeatureDims = Field(default_factory=FeatureDims)
    policy: TriggerPolicy = Field(default_factory=TriggerPolicy)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sim: SimConfig = Field(default_factory=SimConfig)
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)


# STREAM MODELS

class TaskAnnotations(BaseModel):
    """Ground truth attached to a synthetic stream."""
    event_windows: List[Tuple[int, int]] = Field(default_factory=list)
    event_prototypes: List[int] = Field(default_factory=list)
    response_tokens: List[int] = Field(default_factory=list)
    segment_boundaries: List[int] = Field(default_factory=list)
    segment_prototypes: List[int] = Field(default_factory=list)
    segment_captions: List[List[int]] = Field(default_factory=list)
    query_time_s: Optional[int] = None
    query_tokens: List[int] = Field(default_factory=list)
    question_kind: Optional[QuestionKind] = None
    answer_tokens: List[int] = Field(default_factory=list)
    clue_time_s: Optional[int] = None

    @field_validator("event_windows")
    def validate_windows(cls, v):
        for start, end in v:
            if end < start:
                raise ValueError(f"degenerate event window [{start}, {end}]")
        return v

    @field_validator("segment_boundaries")
    def validate_boundaries(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"segment boundaries must be strictly increasing, got {v}")
        return v

    def narration_windows(self, duration_s: int, tolerance_s: int = 1) -> List[Tuple[int, int]]:
        """Scoring window per transition: [b, b + tolerance] clipped to the stream."""
        return [(b, min(b + tolerance_s, duration_s - 1)) for b in self.segment_boundaries]


class StreamSample(BaseModel):
    """A synthetic labeled stream: per-second 2 fps frames and 40 ms audio vectors."""
    sample_id: str
    task: TaskKind
    duration_s: int = Field(..., ge=1)
    video_frames: List[np.ndarray]
    audio_features: List[np.ndarray]
    annotations: TaskAnnotations

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def check_stream(self):
        if len(self.video_frames) != self.duration_s or len(self.audio_features) != self.duration_s:
            raise ValueError(
                f"expected {self.duration_s} seconds of features, got "
                f"{len(self.video_frames)} video / {len(self.audio_features)} audio"
            )
        frame_shape = self.video_frames[0].shape
        audio_dim = self.audio_features[0].shape[-1]
        for t, (frames, audio) in enumerate(zip(self.video_frames, self.audio_features)):
            if frames.ndim != 4 or frames.shape[0] != FRAMES_PER_SECOND or frames.shape != frame_shape:
                raise ValueError(f"second {t}: video must be {FRAMES_PER_SECOND} frames of {frame_shape[1:]}")
            if audio.shape != (AUDIO_PER_SECOND, audio_dim):
                raise ValueError(f"second {t}: audio must be {AUDIO_PER_SECOND} vectors of dim {audio_dim}")

        ann = self.annotations
        for start, end in ann.event_windows:
            if start < 0 or end >= self.duration_s:
                raise ValueError(f"event window [{start}, {end}] outside [0, {self.duration_s})")
        if any(b <= 0 or b >= self.duration_s for b in ann.segment_boundaries):
            raise ValueError("segment boundaries must lie in (0, duration_s)")
        return self

    @property
    def feature_dims(self) -> FeatureDims:
        _, h, w, d_v = self.video_frames[0].shape
        return FeatureDims(d_v=d_v, d_a=self.audio_features[0].shape[-1], grid_h=h, grid_w=w)

    @property
    def is_proactive(self) -> bool:
        return self.task != TaskKind.REACTIVE_QA


class TimingLabels(BaseModel):
    """Per-unit binary speak labels z_t."""
    z: List[int]

    @field_validator("z")
    def validate_binary(cls, v):
        if any(x not in (0, 1) for x in v):
            raise ValueError("timing labels must be 0 or 1")
        return v

    @property
    def T(self) -> int:
        return len(self.z)

    @property
    def n_pos(self) -> int:
        return sum(self.z)


# UNIT MODELS

class UnitToken(BaseModel):
    """One token of a multimodal unit, tagged with modality and intra-unit offset."""
    modality: Modality
    offset: int
    marker: Optional[Marker] = None
    row: int = 0
    col: int = 0
    audio_index: int = 0


class MultimodalUnit(BaseModel):
    """One second of fused video tokens and 40 ms audio tokens wrapped in markers."""
    unit_index: int = Field(..., ge=0)
    layout: List[UnitToken]
    video: np.ndarray
    audio: np.ndarray

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def token_count(self) -> int:
        return len(self.layout)

    @property
    def n_audio(self) -> int:
        return self.audio.shape[0]


class SequenceSegment(BaseModel):
    """A unit, instruction, query or response segment of a streaming sequence."""
    kind: SegmentKind
    timestamp: int
    unit: Optional[MultimodalUnit] = None
    tokens: List[int] = Field(default_factory=list)


# POSITION MODELS

class PositionTriple(BaseModel):
    """(temporal, height, width) rotary position IDs."""
    t: int = Field(..., ge=0)
    h: int = Field(0, ge=0)
    w: int = Field(0, ge=0)

    model_config = ConfigDict(frozen=True)


class PositionAssignment(BaseModel):
    """Per-token positions of one segment and the timeline continuation point."""
    triples: List[PositionTriple]
    base_in: int = Field(..., ge=0)
    base_out: int = Field(..., ge=0)

    @model_validator(mode="after")
    def check_base(self):
        if self.base_out < self.base_in:
            raise ValueError("base_out must be >= base_in")
        return self


# TRACE MODELS

class ResponseSpan(BaseModel):
    """Tokens emitted within one unit for one response turn."""
    turn: int
    start_unit: int
    tokens: List[int]
    complete: bool


class TriggerState(BaseModel):
    """Mode state carried between decide calls."""
    fired: bool = False
    last_trigger: Optional[int] = None
    step: int = 0  # index of the next unit to decide on


class SpeakTrace(BaseModel):
    """Per-unit speak probabilities, decisions and emitted responses of one stream."""
    sample_id: str
    task: TaskKind
    policy: TriggerPolicy
    p: List[float] = Field(default_factory=list)
    s: List[float] = Field(default_factory=list)
    triggered: List[bool] = Field(default_factory=list)
    unit_tokens: List[List[int]] = Field(default_factory=list)
    responses: List[ResponseSpan] = Field(default_factory=list)
    mean_encode_ms: Optional[float] = None

    @property
    def trigger_times(self) -> List[int]:
        return [t for t, fired in enumerate(self.triggered) if fired]

    def first_response_time(self, after: int = 0) -> Optional[int]:
        starts = [span.start_unit for span in self.responses if span.start_unit >= after]
        return min(starts) if starts else None


# CHECKPOINT MODELS

class CheckpointInfo(BaseModel):
    """Metadata stored alongside a parameter checkpoint."""
    format_version: int
    stage_completed: int = Field(0, ge=0, le=2)
    config_hash: Optional[str] = None
    model: ModelConfig
    features: FeatureDims
    manifest: Dict[str, List[int]]


# EVAL MODELS

class EvalReport(BaseModel):
    """Aggregate and per-sample results for one evaluation task."""
    task: str
    metrics: Dict[str, float]
    per_sample: List[Dict[str, Any]] = Field(default_factory=list)
    policy: Optional[TriggerPolicy] = None
    n_samples: int = 0

    @field_validator("metrics")
    def validate_rates(cls, v):
        for name, value in v.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {name}={value} outside [0, 1]")
        return v
