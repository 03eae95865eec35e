import numpy as np
import pytest

from app.errors import DataError
from app.models import Marker, Modality, SegmentKind, TaskKind
from app.services.unit_builder import (
    audio_tokens_for_ms,
    build_stream_sequence,
    build_unit,
    build_units,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestBuildUnit:
    def test_full_second(self, rng):
        unit = build_unit(0, rng.standard_normal((2, 2, 2, 4)), rng.standard_normal((25, 3)))
        assert unit.token_count == 2 + 4 + 25 + 2 == 33

    def test_trailing_partial_second(self, rng):
        unit = build_unit(9, rng.standard_normal((1, 2, 2, 4)), rng.standard_normal((10, 3)))
        assert unit.token_count == 18
        assert unit.unit_index == 9

    def test_layout_order(self, rng):
        unit = build_unit(0, rng.standard_normal((2, 2, 2, 4)), rng.standard_normal((3, 3)))
        layout = unit.layout
        assert [t.marker for t in layout[:2]] == [Marker.VISION_BOS, Marker.AUDIO_BOS]
        assert [t.marker for t in layout[-2:]] == [Marker.AUDIO_EOS, Marker.VISION_EOS]
        assert [t.modality for t in layout[2:-2]] == [Modality.VIDEO] * 4 + [Modality.AUDIO] * 3
        assert [(t.row, t.col) for t in layout[2:6]] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert [t.audio_index for t in layout[6:9]] == [0, 1, 2]
        assert [t.offset for t in layout] == list(range(len(layout)))

    def test_frames_are_fused_by_mean(self, rng):
        frames = rng.standard_normal((2, 2, 2, 4))
        unit = build_unit(0, frames, rng.standard_normal((25, 3)))
        np.testing.assert_allclose(unit.video, frames.mean(axis=0))

    def test_list_inputs(self, rng):
        frames = [rng.standard_normal((2, 2, 4)) for _ in range(2)]
        audio = [rng.standard_normal(3) for _ in range(25)]
        assert build_unit(0, frames, audio).token_count == 33

    def test_mismatched_grids(self, rng):
        with pytest.raises(DataError):
            build_unit(0, [rng.standard_normal((2, 2, 4)), rng.standard_normal((3, 2, 4))], rng.standard_normal((25, 3)))

    def test_mismatched_audio_dims(self, rng):
        with pytest.raises(DataError):
            build_unit(0, rng.standard_normal((2, 2, 2, 4)), [rng.standard_normal(3), rng.standard_normal(4)])

    def test_empty_modalities(self, rng):
        with pytest.raises(DataError):
            build_unit(0, [], rng.standard_normal((25, 3)))
        with pytest.raises(DataError):
            build_unit(0, rng.standard_normal((2, 2, 2, 4)), [])
        with pytest.raises(DataError):
            build_unit(0, rng.standard_normal((2, 2, 2, 4)), np.zeros((0, 3)))

    def test_too_many_frames(self, rng):
        with pytest.raises(DataError):
            build_unit(0, rng.standard_normal((3, 2, 2, 4)), rng.standard_normal((25, 3)))


def test_audio_tokens_for_ms():
    assert audio_tokens_for_ms(1000) == 25
    assert audio_tokens_for_ms(400) == 10
    assert audio_tokens_for_ms(41) == 2
    assert audio_tokens_for_ms(5000) == 25


def test_build_units_keeps_timestamps(make_sample):
    units = build_units(make_sample(TaskKind.ALERT, 5, event_windows=[(1, 2)]))
    assert [u.unit_index for u in units] == [0, 1, 2, 3, 4]


class TestStreamSequence:
    def test_query_placement(self, make_sample):
        sample = make_sample(
            TaskKind.REACTIVE_QA, 8, query_time_s=5, query_tokens=[56, 58], answer_tokens=[1, 2, 3]
        )
        segments = build_stream_sequence(sample)
        kinds = [(s.kind, s.timestamp) for s in segments]
        expected = [(SegmentKind.UNIT, t) for t in range(6)]
        expected += [(SegmentKind.QUERY, 5), (SegmentKind.RESPONSE, 5)]
        expected += [(SegmentKind.UNIT, 6), (SegmentKind.UNIT, 7)]
        assert kinds == expected
        assert segments[6].tokens == [56, 58]
        assert segments[7].tokens == [1, 2, 3, int(Marker.IM_END)]

    def test_query_without_response(self, make_sample):
        sample = make_sample(TaskKind.REACTIVE_QA, 8, query_time_s=5, query_tokens=[56], answer_tokens=[1])
        kinds = [s.kind for s in build_stream_sequence(sample, with_responses=False)]
        assert SegmentKind.RESPONSE not in kinds
        assert kinds.count(SegmentKind.QUERY) == 1

    def test_narration_captions(self, make_sample):
        sample = make_sample(
            TaskKind.NARRATION, 8, segment_boundaries=[3, 6], segment_captions=[[4, 5], [7]]
        )
        segments = build_stream_sequence(sample)
        assert segments[0].kind == SegmentKind.INSTRUCTION
        responses = [(i, s) for i, s in enumerate(segments) if s.kind == SegmentKind.RESPONSE]
        assert [s.timestamp for _, s in responses] == [3, 6]
        for i, s in responses:
            assert segments[i - 1].kind == SegmentKind.UNIT
            assert segments[i - 1].timestamp == s.timestamp
        assert responses[0][1].tokens == [4, 5, int(Marker.IM_END)]

    def test_alert_without_windows(self, make_sample):
        segments = build_stream_sequence(make_sample(TaskKind.ALERT, 5))
        assert [s.kind for s in segments] == [SegmentKind.INSTRUCTION] + [SegmentKind.UNIT] * 5

    def test_alert_responds_inside_every_window_second(self, make_sample):
        sample = make_sample(TaskKind.ALERT, 6, event_windows=[(2, 3)], response_tokens=[9])
        responses = [s for s in build_stream_sequence(sample) if s.kind == SegmentKind.RESPONSE]
        assert [s.timestamp for s in responses] == [2, 3]

    def test_query_beyond_duration(self, make_sample):
        sample = make_sample(TaskKind.REACTIVE_QA, 8, query_time_s=8, query_tokens=[56])
        with pytest.raises(DataError):
            build_stream_sequence(sample)
