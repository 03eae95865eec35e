import math

import numpy as np
import pytest

from app.errors import DataError
from app.models import FeatureDims, QuestionKind, SimConfig, TaskKind, TimingLabels
from app.services.stream_sim import (
    ALERT_PROTOTYPE,
    SignatureBank,
    compute_pos_weight,
    generate_alert_stream,
    generate_dataset,
    generate_narration_stream,
    generate_qa_stream,
    instruction_tokens,
    label_timing,
)


def _same_sample(a, b):
    assert a.sample_id == b.sample_id
    assert a.annotations == b.annotations
    for x, y in zip(a.video_frames, b.video_frames):
        assert np.array_equal(x, y)
    for x, y in zip(a.audio_features, b.audio_features):
        assert np.array_equal(x, y)


class TestAlertStream:
    def test_same_seed_is_deterministic(self, dims):
        _same_sample(generate_alert_stream(30, 1, dims, 7), generate_alert_stream(30, 1, dims, 7))

    def test_different_seeds_differ(self, dims):
        a = generate_alert_stream(30, 1, dims, 7)
        b = generate_alert_stream(30, 1, dims, 8)
        assert not np.array_equal(a.video_frames[0], b.video_frames[0])

    def test_windows_fit_and_do_not_overlap(self, dims):
        sim = SimConfig(min_event_s=2, max_event_s=4)
        for seed in range(20):
            sample = generate_alert_stream(30, 3, dims, seed, sim)
            windows = sample.annotations.event_windows
            assert len(windows) == 3
            assert windows[0][0] >= 0 and windows[-1][1] < 30
            for (_, end), (start, _) in zip(windows, windows[1:]):
                assert start > end + 1
            for start, end in windows:
                assert 2 <= end - start + 1 <= 4

    def test_infeasible_packing(self, dims):
        with pytest.raises(DataError):
            generate_alert_stream(4, 5, dims, 0)

    def test_short_duration(self, dims):
        with pytest.raises(DataError):
            generate_alert_stream(3, 1, dims, 0)

    def test_signature_present_only_inside_window(self):
        dims = FeatureDims(d_v=4, d_a=3, grid_h=2, grid_w=2)
        sim = SimConfig(signature_jitter=0.0)
        sample = generate_alert_stream(30, 1, dims, 7, sim)
        direction = SignatureBank(dims, sim).video_dirs[ALERT_PROTOTYPE]
        start, end = sample.annotations.event_windows[0]

        projection = np.array([float((frames @ direction).mean()) for frames in sample.video_frames])
        inside = np.zeros(30, dtype=bool)
        inside[start:end + 1] = True
        assert projection[inside].mean() - projection[~inside].mean() > 1.0

    def test_labels_match_windows(self, dims):
        sample = generate_alert_stream(30, 2, dims, 3)
        z = label_timing(sample).z
        assert sum(z) == sum(end - start + 1 for start, end in sample.annotations.event_windows)


class TestNarrationStream:
    def test_interior_boundaries(self, dims):
        sample = generate_narration_stream(20, 4, dims, 0)
        ann = sample.annotations
        assert len(ann.segment_boundaries) == 3
        assert all(0 < b < 20 for b in ann.segment_boundaries)
        assert len(ann.segment_captions) == 3
        assert len(ann.segment_prototypes) == 4

    def test_adjacent_segments_use_different_regimes(self, dims):
        for seed in range(10):
            protos = generate_narration_stream(20, 4, dims, seed).annotations.segment_prototypes
            assert all(a != b for a, b in zip(protos, protos[1:]))
            assert ALERT_PROTOTYPE not in protos

    def test_too_many_segments(self, dims):
        with pytest.raises(DataError):
            generate_narration_stream(3, 4, dims, 0)

    def test_deterministic(self, dims):
        _same_sample(generate_narration_stream(20, 4, dims, 5), generate_narration_stream(20, 4, dims, 5))


class TestQAStream:
    def test_query_after_clue(self, dims):
        for seed in range(20):
            ann = generate_qa_stream(12, dims, seed).annotations
            assert ann.clue_time_s == ann.event_windows[-1][1]
            assert ann.clue_time_s < ann.query_time_s < 12

    def test_answer_is_first_regime_caption(self, dims):
        sim = SimConfig()
        sample = generate_qa_stream(12, dims, 4, sim, question_kind=QuestionKind.FIRST_OF_TWO)
        ann = sample.annotations
        assert len(ann.event_windows) == 2
        assert ann.answer_tokens == SignatureBank(dims, sim).captions[ann.event_prototypes[0]]

    def test_which_signature_has_one_event(self, dims):
        ann = generate_qa_stream(12, dims, 4, question_kind=QuestionKind.WHICH_SIGNATURE).annotations
        assert len(ann.event_windows) == 1
        assert ann.question_kind == QuestionKind.WHICH_SIGNATURE


class TestLabelTiming:
    def test_alert(self, make_sample):
        sample = make_sample(TaskKind.ALERT, 6, event_windows=[(2, 4)])
        assert label_timing(sample).z == [0, 0, 1, 1, 1, 0]

    def test_narration(self, make_sample):
        sample = make_sample(TaskKind.NARRATION, 5, segment_boundaries=[3], segment_captions=[[1, 2]])
        assert label_timing(sample).z == [0, 0, 0, 1, 0]

    def test_reactive_qa(self, make_sample):
        sample = make_sample(TaskKind.REACTIVE_QA, 4, query_time_s=2)
        assert label_timing(sample).z == [0, 0, 0, 0]

    def test_missing_annotations(self, make_sample):
        with pytest.raises(DataError):
            label_timing(make_sample(TaskKind.ALERT, 6))
        with pytest.raises(DataError):
            label_timing(make_sample(TaskKind.NARRATION, 6))
        with pytest.raises(DataError):
            label_timing(make_sample(TaskKind.REACTIVE_QA, 6))


class TestPosWeight:
    def test_ratio(self):
        assert compute_pos_weight([TimingLabels(z=[1] * 100 + [0] * 300)]) == 3.0

    def test_balanced(self):
        assert compute_pos_weight([TimingLabels(z=[1, 0]), TimingLabels(z=[0, 1])]) == 1.0

    def test_all_positive(self):
        assert compute_pos_weight([TimingLabels(z=[1, 1, 1])]) == 0.0

    def test_no_positives(self):
        with pytest.raises(DataError):
            compute_pos_weight([TimingLabels(z=[0, 0, 0])])

    def test_from_samples(self, make_sample):
        sample = make_sample(TaskKind.ALERT, 6, event_windows=[(2, 4)])
        assert math.isclose(compute_pos_weight([sample]), 1.0)


class TestDataset:
    def test_ids_and_size(self, dims, sim):
        samples = generate_dataset(TaskKind.NARRATION, 3, 11, dims, sim)
        assert [s.sample_id for s in samples] == [f"narration-11-{i:04d}" for i in range(3)]
        assert all(s.duration_s == sim.narration_duration_s for s in samples)

    def test_samples_differ_within_dataset(self, dims, sim):
        a, b = generate_dataset(TaskKind.ALERT, 2, 0, dims, sim)
        assert not np.array_equal(a.audio_features[0], b.audio_features[0])

    def test_deterministic(self, dims, sim):
        for a, b in zip(
            generate_dataset(TaskKind.REACTIVE_QA, 3, 2, dims, sim),
            generate_dataset(TaskKind.REACTIVE_QA, 3, 2, dims, sim),
        ):
            _same_sample(a, b)

    def test_instructions(self):
        assert instruction_tokens(TaskKind.ALERT) != instruction_tokens(TaskKind.NARRATION)
        assert instruction_tokens(TaskKind.REACTIVE_QA) == []
