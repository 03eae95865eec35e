import itertools
import math

import numpy as np
import pytest

from app.errors import ConfigError, DataError
from app.models import FeatureDims, ResponseSpan, SimConfig, SpeakTrace, TaskKind, TriggerPolicy
from app.services.eval_suite import (
    alert_success,
    crr_score,
    dataset_map_hit,
    evaluate,
    first_response_accuracy,
    iou,
    separability_accuracy,
    map_hit,
    narration_f1,
    narration_match,
    per_second_features,
    rec_score,
    recall_at,
    text_overlap_f1,
    top_span,
)
from app.services.stream_sim import generate_dataset


def make_trace(sample_id, task, triggered, p=None, s=None, responses=(), policy=None):
    n = len(triggered)
    return SpeakTrace(
        sample_id=sample_id,
        task=task,
        policy=policy or TriggerPolicy(),
        p=list(p) if p is not None else [0.5] * n,
        s=list(s) if s is not None else [0.5] * n,
        triggered=list(triggered),
        unit_tokens=[[] for _ in range(n)],
        responses=list(responses),
    )


class TestIntervals:
    def test_iou(self):
        assert iou((2, 8), (4, 10)) == 0.5
        assert iou((3, 7), (3, 7)) == 1.0
        assert iou((0, 2), (5, 9)) == 0.0
        assert iou((4, 4), (4, 4)) == 0.0
        assert iou((4, 9), (4, 10), inclusive=True) == pytest.approx(6 / 7)

    def test_invalid_interval(self):
        with pytest.raises(DataError):
            iou((5, 2), (0, 1))

    def test_recall_at(self):
        assert recall_at([(4, 9)], (4, 10), 0.5) == 1
        assert recall_at([(4, 9)], (4, 10), 0.9) == 0
        assert recall_at([], (4, 10), 0.5) == 0

    def test_top_span_prefers_longest_then_earliest(self):
        assert top_span([(10, 12), (0, 2), (5, 9)]) == (5, 9)
        assert top_span([(6, 7), (1, 2)]) == (1, 2)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = sorted(rng.integers(0, 20, size=2))
            b = sorted(rng.integers(0, 20, size=2))
            k = int(rng.integers(0, 100))
            assert iou(a, b, inclusive=True) == pytest.approx(iou((a[0] + k, a[1] + k), (b[0] + k, b[1] + k), inclusive=True))


def _oracle_ap(scores, positives):
    """AP by enumerating each positive's rank under a stable descending sort."""
    n = len(scores)

    def rank(i):
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))

    pos = [i for i in range(n) if positives[i]]
    ranks = sorted(rank(i) for i in pos)
    return math.fsum((k + 1) / r for k, r in enumerate(ranks)) / len(pos)


class TestMapHit:
    def test_perfect_ranking(self):
        assert map_hit([0.9, 0.1, 0.8], [(0, 0), (2, 2)]) == (1.0, 1)

    def test_positives_last(self):
        ap, hit = map_hit([0.9, 0.1, 0.2], [(1, 2)])
        assert ap == pytest.approx((1 / 2 + 2 / 3) / 2)
        assert hit == 0

    def test_all_positive(self):
        assert map_hit([0.3, 0.9, 0.1], [(0, 2)])[0] == 1.0

    def test_no_positives_skipped(self):
        assert map_hit([0.3, 0.9], []) is None
        assert dataset_map_hit([([0.3, 0.9], []), ([0.9, 0.1], [(0, 0)])]) == (1.0, 1.0, 1)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 1000:
            n = int(rng.integers(1, 12))
            scores = [float(x) for x in rng.integers(0, 5, size=n) / 4]
            start = int(rng.integers(0, n))
            end = int(rng.integers(start, n))
            windows = [(start, end)]
            if rng.random() < 0.3:
                extra = int(rng.integers(0, n))
                windows.append((extra, extra))
            positives = [any(a <= t <= b for a, b in windows) for t in range(n)]

            ap, hit = map_hit(scores, windows)
            assert ap == _oracle_ap(scores, positives)
            assert hit == int(positives[int(np.argsort(-np.asarray(scores), kind="stable")[0])])
            checked += 1


class TestTriggerProtocols:
    def test_alert_success(self):
        assert alert_success(17, (12, 28)) == 1
        assert alert_success(5, (12, 28)) == 0
        assert alert_success(None, (12, 28)) == 0

    def test_first_response_accuracy(self):
        assert first_response_accuracy(12.0, 10.0) == 1
        assert first_response_accuracy(12.5, 10.0) == 0
        assert first_response_accuracy(None, 10.0) == 0

    def test_rec(self):
        assert rec_score([7, 15], [(5, 9), (13, 17)]) == 1.0
        assert rec_score([7], [(5, 9), (13, 17)]) == 0.5
        assert rec_score([], [(5, 9), (13, 17)]) == 0.0

    def test_crr(self):
        assert crr_score(9, 3, 8) == 1
        assert crr_score(5, 3, 8) == 0
        assert crr_score(None, 3, 8) == 0
        assert crr_score(2, 3, 8) == 0

    def test_narration_f1(self):
        assert narration_f1([3, 7], [(2, 4), (6, 8), (10, 12)]) == pytest.approx(0.8)
        assert narration_f1([], [(2, 4)]) == 0.0

    def test_one_trigger_per_segment(self):
        matches = narration_match([3, 4], [(2, 4)])
        assert len(matches) == 1
        assert narration_f1([3, 4], [(2, 4)]) == pytest.approx(2 * 0.5 * 1.0 / 1.5)

    def test_matching_is_maximum(self):
        # The first trigger must leave the long segment for the second one.
        assert len(narration_match([2, 5], [(0, 6), (1, 3)])) == 2

    def test_matching_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            triggers = sorted(int(x) for x in rng.choice(12, size=int(rng.integers(0, 5)), replace=False))
            segments = []
            for _ in range(int(rng.integers(1, 5))):
                start = int(rng.integers(0, 10))
                segments.append((start, start + int(rng.integers(0, 4))))

            best = 0
            for choice in itertools.product(range(-1, len(segments)), repeat=len(triggers)):
                picked = [c for c in choice if c >= 0]
                if len(set(picked)) != len(picked):
                    continue
                if all(c < 0 or segments[c][0] <= t <= segments[c][1] for t, c in zip(triggers, choice)):
                    best = max(best, len(picked))
            assert len(narration_match(triggers, segments)) == best

    def test_narration_shift_symmetry(self):
        triggers, segments = [3, 7, 11], [(2, 4), (6, 8), (10, 12)]
        shifted = narration_f1([t + 40 for t in triggers], [(a + 40, b + 40) for a, b in segments])
        assert shifted == narration_f1(triggers, segments)

    def test_text_overlap(self):
        assert text_overlap_f1([1, 2, 3], [1, 2, 3]) == 1.0
        assert text_overlap_f1([1, 2], [3, 4]) == 0.0
        assert text_overlap_f1([1, 2, 3, 4], [1, 2, 5, 6]) == 0.5
        assert text_overlap_f1([], [1]) == 0.0


class TestSeparability:
    def test_features_shape(self, make_sample, dims):
        sample = make_sample(TaskKind.ALERT, 5, event_windows=[(1, 2)])
        assert per_second_features(sample).shape == (5, dims.d_v + dims.d_a)

    def test_default_streams_are_separable(self):
        samples = generate_dataset(TaskKind.ALERT, 20, 0, FeatureDims())
        assert separability_accuracy(samples) >= 0.95

    def test_needs_two_samples(self, make_sample):
        with pytest.raises(DataError):
            separability_accuracy([make_sample(TaskKind.ALERT, 5, event_windows=[(1, 2)])])


class TestEvaluate:
    def test_alert(self, make_sample):
        samples = [
            make_sample(TaskKind.ALERT, 8, seed=0, event_windows=[(2, 4)]),
            make_sample(TaskKind.ALERT, 8, seed=1, event_windows=[(2, 4)]),
        ]
        traces = [
            make_trace(samples[0].sample_id, TaskKind.ALERT, [False, False, False, True] + [False] * 4),
            make_trace(samples[1].sample_id, TaskKind.ALERT, [False] * 8),
        ]
        report = evaluate("alert", traces, samples)
        assert report.metrics == {"alert_success": 0.5, "first_response_acc": 0.5}
        assert report.n_samples == 2
        assert report.per_sample[0]["first_trigger"] == 3

    def test_recurring(self, make_sample):
        sample = make_sample(TaskKind.ALERT, 8, event_windows=[(1, 2), (5, 6)])
        trace = make_trace(sample.sample_id, TaskKind.ALERT, [False, True] + [False] * 6)
        assert evaluate("recurring", [trace], [sample]).metrics == {"rec": 0.5}

    def test_narration(self, make_sample):
        sample = make_sample(
            TaskKind.NARRATION, 10, segment_boundaries=[3, 6], segment_captions=[[1, 2], [3, 4]]
        )
        triggered = [t in (3, 8) for t in range(10)]
        responses = [
            ResponseSpan(turn=0, start_unit=3, tokens=[1, 2], complete=True),
            ResponseSpan(turn=1, start_unit=8, tokens=[9], complete=True),
        ]
        trace = make_trace(sample.sample_id, TaskKind.NARRATION, triggered, responses=responses)
        metrics = evaluate("narration", [trace], [sample]).metrics
        assert metrics["precision"] == 0.5
        assert metrics["recall"] == 0.5
        assert metrics["f1"] == pytest.approx(0.5)
        assert metrics["text_f1"] == 1.0

    def test_narration_tolerance_widens_windows(self, make_sample):
        sample = make_sample(
            TaskKind.NARRATION, 10, segment_boundaries=[3, 6], segment_captions=[[1, 2], [3, 4]]
        )
        trace = make_trace(sample.sample_id, TaskKind.NARRATION, [t in (5, 9) for t in range(10)])
        assert evaluate("narration", [trace], [sample]).metrics["f1"] == 0.0
        wide = evaluate("narration", [trace], [sample], SimConfig(narration_tolerance_s=3))
        assert wide.metrics["f1"] == 1.0
        assert [row["matched"] for row in wide.per_sample] == [2]

    def test_grounding(self, make_sample):
        sample = make_sample(TaskKind.ALERT, 6, event_windows=[(2, 3)])
        p = [0.1, 0.2, 0.9, 0.8, 0.3, 0.1]
        trace = make_trace(sample.sample_id, TaskKind.ALERT, [False] * 6, p=p, s=p)
        metrics = evaluate("grounding", [trace], [sample]).metrics
        assert metrics == {"mAP": 1.0, "hit@1": 1.0, "r@0.5": 1.0, "r@0.7": 1.0}

    def test_qa(self, make_sample):
        sample = make_sample(
            TaskKind.REACTIVE_QA, 8, query_time_s=5, query_tokens=[56], answer_tokens=[1, 2], clue_time_s=3
        )
        span = ResponseSpan(turn=0, start_unit=5, tokens=[1, 2], complete=True)
        trace = make_trace(sample.sample_id, TaskKind.REACTIVE_QA, [False] * 8, responses=[span])
        assert evaluate("qa", [trace], [sample]).metrics == {"text_f1": 1.0, "crr": 1.0}

    def test_missing_annotations(self, make_sample):
        trace = make_trace("missing", TaskKind.ALERT, [False] * 4)
        with pytest.raises(DataError):
            evaluate("alert", [trace], [make_sample(TaskKind.ALERT, 4, event_windows=[(0, 1)])])

    def test_unknown_task(self):
        with pytest.raises(ConfigError):
            evaluate("bleu", [], [])

    def test_separability_task(self):
        samples = generate_dataset(TaskKind.ALERT, 6, 0, FeatureDims())
        report = evaluate("separability", [], samples)
        assert 0.0 <= report.metrics["separability_accuracy"] <= 1.0
        assert report.n_samples == 6
