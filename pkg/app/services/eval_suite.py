"""
Unified proactive/reactive evaluation.

Interval conventions: grounding spans and event windows are inclusive
seconds; `iou` on raw real-valued intervals uses end - start as length.
"""

import logging
import math
from collections import Counter
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LogisticRegression

from app.errors import ConfigError, DataError
from app.models import EvalReport, SimConfig, SpeakTrace, StreamSample, TaskKind
from app.services.stream_sim import label_timing
from app.services.trigger_engine import extract_spans, rank_timestamps

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]

EVAL_TASKS = ("alert", "recurring", "narration", "grounding", "qa", "separability")


# INTERVALS

def iou(a: Interval, b: Interval, inclusive: bool = False) -> float:
    """Intersection over union of two intervals; both empty -> 0."""
    pad = 1 if inclusive else 0
    for start, end in (a, b):
        if end < start:
            raise DataError(f"invalid interval [{start}, {end}]")
    len_a = a[1] - a[0] + pad
    len_b = b[1] - b[0] + pad
    inter = max(0, min(a[1], b[1]) - max(a[0], b[0]) + pad)
    union = len_a + len_b - inter
    if union <= 0:
        return 0.0
    return inter / union


def top_span(pred_spans: Sequence[Interval]) -> Optional[Interval]:
    """Longest predicted span, earlier one on ties."""
    if not pred_spans:
        return None
    ordered = sorted(pred_spans, key=lambda s: s[0])
    return max(ordered, key=lambda s: s[1] - s[0])


def recall_at(pred_spans: Sequence[Interval], gt_span: Interval, tau: float) -> int:
    """1 iff the top-ranked predicted span reaches IoU >= tau with the ground truth."""
    best = top_span(pred_spans)
    if best is None:
        return 0
    return int(iou(best, gt_span, inclusive=True) >= tau)


# RANKING

def _positives(n_seconds: int, gt_windows: Sequence[Tuple[int, int]]) -> np.ndarray:
    mask = np.zeros(n_seconds, dtype=bool)
    for start, end in gt_windows:
        mask[max(0, start):min(n_seconds - 1, end) + 1] = True
    return mask


def map_hit(ranked_scores: Sequence[float], gt_windows: Sequence[Tuple[int, int]]) -> Optional[Tuple[float, int]]:
    """
    Average precision of per-second retrieval and HIT@1 for one sample.

    Returns None (and warns) when no second lies inside a window.
    """
    scores = np.asarray(ranked_scores, dtype=np.float64)
    positives = _positives(scores.size, gt_windows)
    n_pos = int(positives.sum())
    if n_pos == 0:
        logger.warning("Skipping sample with no positive seconds in map_hit")
        return None

    order = np.argsort(-scores, kind="stable")
    precisions = []
    hits = 0
    for rank, t in enumerate(order, start=1):
        if positives[t]:
            hits += 1
            precisions.append(hits / rank)
    ap = math.fsum(precisions) / n_pos
    return ap, int(positives[order[0]])


def dataset_map_hit(pairs: Sequence[Tuple[Sequence[float], Sequence[Tuple[int, int]]]]) -> Tuple[float, float, int]:
    """(mAP, HIT@1, n_scored) over samples, skipping those without positives."""
    results = [r for r in (map_hit(s, w) for s, w in pairs) if r is not None]
    if not results:
        return 0.0, 0.0, 0
    return (
        float(np.mean([ap for ap, _ in results])),
        float(np.mean([hit for _, hit in results])),
        len(results),
    )


# TRIGGER PROTOCOLS

def alert_success(trigger_time: Optional[float], gt_interval: Interval) -> int:
    if trigger_time is None:
        return 0
    return int(gt_interval[0] <= trigger_time <= gt_interval[1])


def first_response_accuracy(first_time: Optional[float], gt_time: float, tol: float = 2.0) -> int:
    if first_time is None:
        return 0
    return int(abs(first_time - gt_time) <= tol)


def rec_points(trigger_times: Sequence[float], segments: Sequence[Interval]) -> Tuple[int, int]:
    """(segments containing at least one trigger, segments)."""
    points = sum(any(start <= t <= end for t in trigger_times) for start, end in segments)
    return points, len(segments)


def rec_score(trigger_times: Sequence[float], segments: Sequence[Interval]) -> float:
    points, total = rec_points(trigger_times, segments)
    return points / total if total else 0.0


def crr_score(first_response_time: Optional[float], ask_time: float, clue_time: float) -> int:
    """1 iff the first response after the ask comes no earlier than the clue."""
    if first_response_time is None or first_response_time < ask_time:
        return 0
    return int(first_response_time >= clue_time)


def narration_match(trigger_times: Sequence[float], gt_segments: Sequence[Interval]) -> List[Tuple[float, int]]:
    """
    One-to-one trigger/segment matching.

    Triggers are visited in time order and each takes the unmatched segment
    containing it that ends first, which yields a maximum matching.
    """
    matched: List[Tuple[float, int]] = []
    used = set()
    for t in sorted(trigger_times):
        candidates = [
            (end, start, i)
            for i, (start, end) in enumerate(gt_segments)
            if i not in used and start <= t <= end
        ]
        if candidates:
            _, _, i = min(candidates)
            used.add(i)
            matched.append((t, i))
    return matched


def _f1(n_matched: int, n_triggers: int, n_segments: int) -> float:
    if n_triggers == 0 or n_segments == 0 or n_matched == 0:
        return 0.0
    precision = n_matched / n_triggers
    recall = n_matched / n_segments
    return 2 * precision * recall / (precision + recall)


def narration_f1(trigger_times: Sequence[float], gt_segments: Sequence[Interval]) -> float:
    return _f1(len(narration_match(trigger_times, gt_segments)), len(trigger_times), len(gt_segments))


def text_overlap_f1(response_tokens: Sequence[int], reference_tokens: Sequence[int]) -> float:
    """Token-multiset F1."""
    if not response_tokens or not reference_tokens:
        return 0.0
    common = sum((Counter(response_tokens) & Counter(reference_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(response_tokens)
    recall = common / len(reference_tokens)
    return 2 * precision * recall / (precision + recall)


# SEPARABILITY

def per_second_features(sample: StreamSample) -> np.ndarray:
    """(T, d_v + d_a): raw video and audio features averaged within each second."""
    video = np.stack([f.mean(axis=(0, 1, 2)) for f in sample.video_frames])
    audio = np.stack([a.mean(axis=0) for a in sample.audio_features])
    return np.concatenate([video, audio], axis=1)


def separability_accuracy(samples: Sequence[StreamSample], train_fraction: float = 0.7, seed: int = 0) -> float:
    """Held-out accuracy of a logistic classifier on raw features against timing labels."""
    if len(samples) < 2:
        raise DataError("the separability check needs at least two samples")
    n_train = min(len(samples) - 1, max(1, int(round(len(samples) * train_fraction))))

    def stack(subset):
        x = np.concatenate([per_second_features(s) for s in subset])
        y = np.concatenate([label_timing(s).z for s in subset])
        return x, y

    x_train, y_train = stack(samples[:n_train])
    x_test, y_test = stack(samples[n_train:])
    if len(set(y_train.tolist())) < 2:
        raise DataError("separability training split has a single class")

    classifier = LogisticRegression(max_iter=1000, random_state=seed)
    classifier.fit(x_train, y_train)
    accuracy = float(classifier.score(x_test, y_test))
    logger.info(f"Separability accuracy {accuracy:.4f} on {len(y_test)} held-out seconds")
    return accuracy


# TASK REPORTS

def _turn_tokens(trace: SpeakTrace) -> Dict[int, List[int]]:
    """Full token list of every response turn, keyed by the unit where it started."""
    starts: Dict[int, int] = {}
    tokens: Dict[int, List[int]] = {}
    for span in trace.responses:
        starts.setdefault(span.turn, span.start_unit)
        tokens.setdefault(span.turn, []).extend(span.tokens)
    return {starts[turn]: toks for turn, toks in tokens.items()}


def _pair(traces: Sequence[SpeakTrace], samples: Sequence[StreamSample]) -> List[Tuple[SpeakTrace, StreamSample]]:
    by_id = {s.sample_id: s for s in samples}
    pairs = []
    for trace in traces:
        if trace.sample_id not in by_id:
            raise DataError(f"no annotations for trace {trace.sample_id}")
        pairs.append((trace, by_id[trace.sample_id]))
    if not pairs:
        raise DataError("nothing to evaluate")
    return pairs


def evaluate_alert(pairs) -> Tuple[Dict[str, float], List[Dict]]:
    rows = []
    for trace, sample in pairs:
        windows = sample.annotations.event_windows
        if not windows:
            raise DataError(f"{sample.sample_id}: no event windows")
        first = trace.trigger_times[0] if trace.trigger_times else None
        rows.append({
            "sample_id": sample.sample_id,
            "first_trigger": first,
            "alert_success": max(alert_success(first, w) for w in windows),
            "first_response_acc": first_response_accuracy(first, windows[0][0]),
        })
    metrics = {
        "alert_success": float(np.mean([r["alert_success"] for r in rows])),
        "first_response_acc": float(np.mean([r["first_response_acc"] for r in rows])),
    }
    return metrics, rows


def evaluate_recurring(pairs):
    rows = []
    points = total = 0
    for trace, sample in pairs:
        p, n = rec_points(trace.trigger_times, sample.annotations.event_windows)
        points += p
        total += n
        rows.append({"sample_id": sample.sample_id, "points": p, "segments": n, "triggers": trace.trigger_times})
    return {"rec": points / total if total else 0.0}, rows


def evaluate_narration(pairs, tolerance_s: int = 1):
    rows = []
    n_matched = n_triggers = n_segments = 0
    text_scores = []
    for trace, sample in pairs:
        ann = sample.annotations
        windows = ann.narration_windows(sample.duration_s, tolerance_s)
        matches = narration_match(trace.trigger_times, windows)
        turns = _turn_tokens(trace)
        for t, i in matches:
            text_scores.append(text_overlap_f1(turns.get(t, []), ann.segment_captions[i]))
        n_matched += len(matches)
        n_triggers += len(trace.trigger_times)
        n_segments += len(windows)
        rows.append({
            "sample_id": sample.sample_id,
            "triggers": trace.trigger_times,
            "matched": len(matches),
            "f1": _f1(len(matches), len(trace.trigger_times), len(windows)),
        })
    metrics = {
        "precision": n_matched / n_triggers if n_triggers else 0.0,
        "recall": n_matched / n_segments if n_segments else 0.0,
        "f1": _f1(n_matched, n_triggers, n_segments),
        "text_f1": float(np.mean(text_scores)) if text_scores else 0.0,
    }
    return metrics, rows


def evaluate_grounding(pairs):
    rows = []
    ranked = []
    for trace, sample in pairs:
        windows = sample.annotations.event_windows
        scores = rank_timestamps(trace.p)
        ranked.append((scores, windows))
        spans = extract_spans(trace.s, trace.policy.threshold)
        gt = windows[0] if windows else None
        rows.append({
            "sample_id": sample.sample_id,
            "top_span": top_span(spans),
            "r@0.5": recall_at(spans, gt, 0.5) if gt else 0,
            "r@0.7": recall_at(spans, gt, 0.7) if gt else 0,
        })
    m_ap, hit1, n_scored = dataset_map_hit(ranked)
    metrics = {
        "mAP": m_ap,
        "hit@1": hit1,
        "r@0.5": float(np.mean([r["r@0.5"] for r in rows])),
        "r@0.7": float(np.mean([r["r@0.7"] for r in rows])),
    }
    if n_scored < len(rows):
        logger.warning(f"{len(rows) - n_scored} grounding samples had no positives and were skipped")
    return metrics, rows


def evaluate_qa(pairs):
    rows = []
    for trace, sample in pairs:
        ann = sample.annotations
        if ann.query_time_s is None or ann.clue_time_s is None:
            raise DataError(f"{sample.sample_id}: missing query or clue time")
        first = trace.first_response_time(after=ann.query_time_s)
        turns = _turn_tokens(trace)
        answer = turns.get(first, []) if first is not None else []
        rows.append({
            "sample_id": sample.sample_id,
            "first_response": first,
            "text_f1": text_overlap_f1(answer, ann.answer_tokens),
            "crr": crr_score(first, ann.query_time_s, ann.clue_time_s),
        })
    metrics = {
        "text_f1": float(np.mean([r["text_f1"] for r in rows])),
        "crr": float(np.mean([r["crr"] for r in rows])),
    }
    return metrics, rows


_EVALUATORS = {
    "alert": evaluate_alert,
    "recurring": evaluate_recurring,
    "narration": evaluate_narration,
    "grounding": evaluate_grounding,
    "qa": evaluate_qa,
}


def evaluate(
    task: str,
    traces: Sequence[SpeakTrace],
    samples: Sequence[StreamSample],
    sim: Optional[SimConfig] = None,
) -> EvalReport:
    """Score stored traces against their samples' annotations for one protocol.

    `sim` supplies the narration scoring tolerance; defaults apply when omitted.
    """
    if task == "separability":
        proactive = [s for s in samples if s.task == TaskKind.ALERT]
        accuracy = separability_accuracy(proactive)
        return EvalReport(task=task, metrics={"separability_accuracy": accuracy}, n_samples=len(proactive))
    if task not in _EVALUATORS:
        raise ConfigError(f"unknown eval task '{task}'; available: {list(EVAL_TASKS)}")

    evaluator = _EVALUATORS[task]
    if task == "narration":
        evaluator = partial(evaluate_narration, tolerance_s=(sim or SimConfig()).narration_tolerance_s)

    pairs = _pair(traces, samples)
    try:
        metrics, rows = evaluator(pairs)
    except DataError as e:
        logger.error(f"Evaluation of {task} failed: {str(e)}")
        raise
    report = EvalReport(
        task=task,
        metrics=metrics,
        per_sample=rows,
        policy=pairs[0][0].policy,
        n_samples=len(pairs),
    )
    logger.info(f"Evaluated {task} on {len(pairs)} traces: {metrics}")
    return report
