"""
Streaming inference: encode one unit per second against a persistent KV cache,
read the speak probability at the unit's closing marker, smooth it over a
sliding window and let a mode-specific state machine decide when to respond.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.errors import ConfigError, DataError
from app.models import (
    CONTENT_VOCAB,
    Decision,
    Marker,
    MultimodalUnit,
    ResponseSpan,
    SegmentKind,
    SequenceSegment,
    Smoothing,
    SpeakTrace,
    StreamSample,
    TaskKind,
    TriggerMode,
    TriggerPolicy,
    TriggerState,
)
from app.services.backbone import KVCache, StreamModel, embed, forward_step, prepare_segments
from app.services.speak_head import speak_logits_at
from app.services.stream_sim import instruction_tokens
from app.services.unit_builder import build_unit

logger = logging.getLogger(__name__)

# Next-token decoder: (logits over the token table, tokens emitted so far in this turn) -> token id.
Decoder = Callable[[torch.Tensor, List[int]], int]

PRESETS: Dict[str, TriggerPolicy] = {
    "highlights": TriggerPolicy(mode=TriggerMode.STATIC_SCORING, window=5),
    "moments": TriggerPolicy(mode=TriggerMode.STATIC_SCORING, window=3, threshold=0.45),
    "pa": TriggerPolicy(mode=TriggerMode.ALERT_ONCE, window=5, threshold=0.5),
    "po": TriggerPolicy(mode=TriggerMode.ALERT_ONCE, window=4, threshold=0.2),
    "rec": TriggerPolicy(mode=TriggerMode.ALERT_RECURRING, window=2, threshold=0.7),
    "crr": TriggerPolicy(mode=TriggerMode.ALERT_ONCE, window=2, threshold=0.7),
    "steps": TriggerPolicy(mode=TriggerMode.NARRATION, window=1, threshold=0.975),
    "sequential_steps": TriggerPolicy(mode=TriggerMode.NARRATION, window=1, threshold=0.97),
    "alert": TriggerPolicy(mode=TriggerMode.ALERT_ONCE, window=3, threshold=0.5),
    "recurring": TriggerPolicy(mode=TriggerMode.ALERT_RECURRING, window=3, threshold=0.5, cooldown_units=2),
    "narration": TriggerPolicy(mode=TriggerMode.NARRATION, window=1, threshold=0.5),
    "grounding": TriggerPolicy(mode=TriggerMode.STATIC_SCORING, window=3, threshold=0.5),
}


def get_preset(name: str) -> TriggerPolicy:
    """Look up a named policy preset."""
    try:
        return PRESETS[name].model_copy()
    except KeyError:
        raise ConfigError(f"unknown policy preset '{name}'; available: {sorted(PRESETS)}") from None


def smooth(
    p_history: Sequence[float],
    window: int,
    smoothing: Smoothing = Smoothing.MEAN,
    threshold: float = 0.5,
) -> float:
    """
    Sliding-window mean of the most recent `window` probabilities.

    Before `window` units have been seen the mean covers whatever exists. In
    vote mode each probability is first replaced by the indicator p >= threshold.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if not p_history:
        raise DataError("cannot smooth an empty probability history")
    recent = np.asarray(p_history[-window:], dtype=np.float64)
    if smoothing == Smoothing.VOTE:
        recent = (recent >= threshold).astype(np.float64)
    return float(recent.mean())


def decide(
    s_t: float,
    policy: TriggerPolicy,
    state: TriggerState,
    t: Optional[int] = None,
) -> Tuple[Decision, TriggerState]:
    """Apply the policy's trigger mode to one smoothed score."""
    t = state.step if t is None else t
    above = s_t >= policy.threshold
    fire = False

    if policy.mode == TriggerMode.ALERT_ONCE:
        fire = above and not state.fired
    elif policy.mode == TriggerMode.ALERT_RECURRING:
        fire = above and (state.last_trigger is None or t - state.last_trigger >= policy.cooldown_units)
    elif policy.mode == TriggerMode.NARRATION:
        fire = above

    if fire:
        new_state = TriggerState(fired=True, last_trigger=t, step=t + 1)
        return Decision.TRIGGER, new_state
    return Decision.STAY_SILENT, state.model_copy(update={"step": t + 1})


def greedy_decoder(logits: torch.Tensor, emitted: List[int]) -> int:
    """Argmax over content tokens and the terminal marker."""
    allowed = torch.full_like(logits, float("-inf"))
    allowed[:CONTENT_VOCAB] = 0.0
    allowed[int(Marker.IM_END)] = 0.0
    return int(torch.argmax(logits + allowed))


class StreamSession:
    """Model + KV cache + the next free temporal position of one live stream."""

    def __init__(self, model: StreamModel):
        self.model = model
        self.cache = KVCache(model.config.n_layers)
        self.base = 0

    def push(self, segments: List[SequenceSegment]):
        """Encode segments against the cache; returns (prepared, hiddens, logits)."""
        prepared = prepare_segments(segments, self.model.features, base=self.base)
        with torch.no_grad():
            hiddens, logits, _ = forward_step(
                embed(prepared, self.model), prepared.positions, self.cache, self.model
            )
        self.base = prepared.base_out
        return prepared, hiddens, logits

    def push_unit(self, unit: MultimodalUnit) -> Tuple[float, torch.Tensor]:
        """Encode one unit; returns (speak probability, next-token logits)."""
        segment = SequenceSegment(kind=SegmentKind.UNIT, timestamp=unit.unit_index, unit=unit)
        prepared, hiddens, logits = self.push([segment])
        with torch.no_grad():
            logit = speak_logits_at(hiddens, prepared.unit_ends, self.model.speak_head)
        return float(torch.sigmoid(logit)[0]), logits[-1]

    def push_text(self, kind: SegmentKind, tokens: List[int], timestamp: int) -> torch.Tensor:
        """Encode a text segment; returns next-token logits."""
        _, _, logits = self.push([SequenceSegment(kind=kind, timestamp=timestamp, tokens=tokens)])
        return logits[-1]


class _Turn:
    """An in-flight response that may span several units."""

    def __init__(self, index: int):
        self.index = index
        self.emitted: List[int] = []


def _decode(
    session: StreamSession,
    logits: torch.Tensor,
    turn: _Turn,
    unit_index: int,
    budget: int,
    decoder: Decoder,
) -> ResponseSpan:
    """
    Emit up to `budget` content tokens inside the current unit.

    At the budget the next token is peeked: a terminal marker closes the turn
    here, anything else is dropped and the turn continues after the next unit.
    """
    span_tokens: List[int] = []
    while True:
        token = decoder(logits, turn.emitted)
        if token == int(Marker.IM_END):
            session.push_text(SegmentKind.RESPONSE, [token], unit_index)
            return ResponseSpan(turn=turn.index, start_unit=unit_index, tokens=span_tokens, complete=True)
        if not 0 <= token < CONTENT_VOCAB:
            raise DataError(f"decoder produced non-content token {token}")
        span_tokens.append(token)
        turn.emitted.append(token)
        logits = session.push_text(SegmentKind.RESPONSE, [token], unit_index)
        if len(span_tokens) >= budget:
            if decoder(logits, turn.emitted) == int(Marker.IM_END):
                session.push_text(SegmentKind.RESPONSE, [int(Marker.IM_END)], unit_index)
                return ResponseSpan(turn=turn.index, start_unit=unit_index, tokens=span_tokens, complete=True)
            session.push_text(SegmentKind.RESPONSE, [int(Marker.EOT)], unit_index)
            return ResponseSpan(turn=turn.index, start_unit=unit_index, tokens=span_tokens, complete=False)


def _check_dims(model: StreamModel, sample: StreamSample):
    dims = sample.feature_dims
    if (dims.d_v, dims.d_a) != (model.features.d_v, model.features.d_a):
        raise ConfigError(
            f"checkpoint expects feature dims (d_v={model.features.d_v}, d_a={model.features.d_a}) "
            f"but stream {sample.sample_id} has (d_v={dims.d_v}, d_a={dims.d_a})"
        )


def run_stream(
    model: StreamModel,
    sample: StreamSample,
    policy: TriggerPolicy,
    instruction: Optional[List[int]] = None,
    decoder: Optional[Decoder] = None,
    pipelined: bool = False,
) -> SpeakTrace:
    """
    Run a whole stream unit by unit and record the speak trace.

    Proactive streams start with the task instruction. A triggered response
    that exhausts the per-unit token budget is closed with the continuation
    marker and resumed after the next unit without consulting the policy.
    Reactive streams get their query right after the unit at `query_time_s`
    and answer immediately; their speak decisions are recorded but never fire.
    """
    _check_dims(model, sample)
    decoder = decoder or greedy_decoder
    was_training = model.training
    model.eval()

    session = StreamSession(model)
    if sample.is_proactive:
        tokens = instruction_tokens(sample.task) if instruction is None else list(instruction)
        if tokens:
            session.push_text(SegmentKind.INSTRUCTION, tokens, 0)

    trace = SpeakTrace(sample_id=sample.sample_id, task=sample.task, policy=policy)
    state = TriggerState()
    pending: Optional[_Turn] = None
    n_turns = 0
    encode_ms: List[float] = []
    ann = sample.annotations

    def unit_at(t: int) -> MultimodalUnit:
        return build_unit(t, sample.video_frames[t], sample.audio_features[t])

    executor = ThreadPoolExecutor(max_workers=1) if pipelined else None
    try:
        upcoming = executor.submit(unit_at, 0) if executor else None
        for t in range(sample.duration_s):
            start = time.perf_counter()
            if executor:
                unit = upcoming.result()
                if t + 1 < sample.duration_s:
                    upcoming = executor.submit(unit_at, t + 1)
            else:
                unit = unit_at(t)
            p_t, logits = session.push_unit(unit)
            encode_ms.append((time.perf_counter() - start) * 1000.0)

            trace.p.append(p_t)
            s_t = smooth(trace.p, policy.window, policy.smoothing, policy.threshold)
            trace.s.append(s_t)
            emitted: List[int] = []

            if pending is not None:
                state = state.model_copy(update={"step": t + 1})
                trace.triggered.append(False)
                span = _decode(session, logits, pending, t, policy.token_budget, decoder)
            else:
                decision, state = decide(s_t, policy, state, t)
                fired = sample.is_proactive and decision == Decision.TRIGGER
                trace.triggered.append(fired)
                span = None
                if fired:
                    pending = _Turn(n_turns)
                    n_turns += 1
                    span = _decode(session, logits, pending, t, policy.token_budget, decoder)
                elif not sample.is_proactive and t == ann.query_time_s:
                    logits = session.push_text(SegmentKind.QUERY, list(ann.query_tokens), t)
                    pending = _Turn(n_turns)
                    n_turns += 1
                    span = _decode(session, logits, pending, t, policy.token_budget, decoder)

            if span is not None:
                trace.responses.append(span)
                emitted = span.tokens
                if span.complete:
                    pending = None
            trace.unit_tokens.append(emitted)
    finally:
        if executor:
            executor.shutdown(wait=True)
        model.train(was_training)

    trace.mean_encode_ms = float(np.mean(encode_ms)) if encode_ms else None
    logger.info(
        f"Stream {sample.sample_id}: {len(trace.trigger_times)} triggers, "
        f"{len(trace.responses)} response spans, mean encode {trace.mean_encode_ms:.2f} ms/unit"
    )
    return trace


def rank_timestamps(p_trace: Sequence[float]) -> List[float]:
    """Min-max normalized relevance per second; a constant trace scores 0.5 everywhere."""
    p = np.asarray(p_trace, dtype=np.float64)
    if p.size == 0:
        return []
    lo, hi = p.min(), p.max()
    if hi == lo:
        return [0.5] * p.size
    return [float(x) for x in (p - lo) / (hi - lo)]


def extract_spans(s_trace: Sequence[float], threshold: float) -> List[Tuple[int, int]]:
    """Maximal runs of consecutive seconds with s >= threshold, inclusive bounds."""
    spans = []
    start = None
    for t, s in enumerate(s_trace):
        if s >= threshold and start is None:
            start = t
        elif s < threshold and start is not None:
            spans.append((start, t - 1))
            start = None
    if start is not None:
        spans.append((start, len(s_trace) - 1))
    return spans


def replay_trace(trace: SpeakTrace, policy: TriggerPolicy) -> SpeakTrace:
    """
    Re-apply smoothing and trigger decisions to a stored trace's probabilities.

    Under the recorded policy this reproduces the recorded trigger times,
    including units skipped while a response was still being continued. Under
    another policy the recorded probabilities are reused as-is, so responses
    that would have entered the context differently are not re-encoded;
    replayed proactive responses then carry trigger times only.
    """
    proactive = trace.task != TaskKind.REACTIVE_QA
    same_policy = policy == trace.policy
    first_span_units = {}
    for span in trace.responses:
        first_span_units.setdefault(span.turn, span.start_unit)
    continued = {
        span.start_unit for span in trace.responses if span.start_unit != first_span_units[span.turn]
    } if same_policy else set()

    state = TriggerState()
    s_values, triggered = [], []
    for t in range(len(trace.p)):
        s_t = smooth(trace.p[: t + 1], policy.window, policy.smoothing, policy.threshold)
        s_values.append(s_t)
        if t in continued:
            state = state.model_copy(update={"step": t + 1})
            triggered.append(False)
            continue
        decision, state = decide(s_t, policy, state, t)
        triggered.append(proactive and decision == Decision.TRIGGER)
    if not proactive or same_policy:
        return trace.model_copy(update={"policy": policy, "s": s_values, "triggered": triggered})
    responses = [
        ResponseSpan(turn=i, start_unit=t, tokens=[], complete=True)
        for i, t in enumerate(t for t, fired in enumerate(triggered) if fired)
    ]
    return trace.model_copy(
        update={"policy": policy, "s": s_values, "triggered": triggered, "responses": responses}
    )
