import json

import pytest
from hypothesis import given, settings, strategies as st

from pianofinger.errors import BadHeader, EmptyStream
from pianofinger.midi_io import NoteEvent
from pianofinger.pose import (
    LEFT,
    RIGHT,
    Fingertip,
    HandPose,
    PoseFrame,
    PoseStream,
    dump_pose_stream,
    frame_window,
    frames_for_note,
    normalize_hand_labels,
    normalize_stream,
    parse_pose_stream,
)
from pianofinger.simulator import SimConfig, generate_piece, render_pose_stream


def hand(label, box, conf=1.0, xs=(100, 110, 120, 130, 140)):
    return HandPose(label, tuple(Fingertip(i + 1, x, 50.0, conf) for i, x in enumerate(xs)), box)


def empty_stream(n, fps=25.0):
    return PoseStream(fps, tuple(PoseFrame(i, i / fps) for i in range(n)))


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

class TestParse:
    def test_single_frame(self):
        tips = [{"f": f, "x": 100 + 10 * f, "y": 50, "c": 0.9} for f in range(1, 6)]
        text = (json.dumps({"fps": 25}) + "\n"
                + json.dumps({"frame": 3, "hands": [{"label": "R", "box_x_min": 90, "tips": tips}]}))
        s = parse_pose_stream(text)
        assert len(s) == 1 and s.fps == 25
        fr = s.frames[0]
        assert fr.time_s == pytest.approx(0.04 * 3)
        assert fr.hands[0].hand == RIGHT and len(fr.hands[0].fingertips) == 5

    def test_three_hands_parse_permissively(self):
        hands = [{"label": "R", "tips": []}] * 3
        s = parse_pose_stream('{"fps": 25}\n' + json.dumps({"frame": 0, "hands": hands}))
        assert len(s.frames[0].hands) == 3
        assert len(normalize_hand_labels(s.frames[0]).hands) == 2

    def test_low_confidence_tips_dropped(self):
        tips = [{"f": 1, "x": 1, "y": 1, "c": 0.01}, {"f": 2, "x": 1, "y": 1, "c": 0.5}]
        s = parse_pose_stream('{"fps": 25}\n' + json.dumps(
            {"frame": 0, "hands": [{"label": "L", "tips": tips}]}))
        assert [t.finger for t in s.frames[0].hands[0].fingertips] == [2]

    def test_malformed_lines_skipped(self):
        text = '{"fps": 25}\n{"frame": 0}\nnot json\n{"frame": "x"}\n{"frame": 2}\n'
        s = parse_pose_stream(text)
        assert [f.frame_index for f in s.frames] == [0, 2]
        assert s.malformed_lines == 2

    def test_empty(self):
        with pytest.raises(EmptyStream):
            parse_pose_stream("\n\n")

    @pytest.mark.parametrize("head", ['{"rate": 25}', '{"fps": 0}', "[]"])
    def test_bad_header(self, head):
        with pytest.raises(BadHeader):
            parse_pose_stream(head + '\n{"frame": 0}')

    def test_simulator_round_trip(self, geometry):
        cfg = SimConfig(seed=11, n_notes=20, keypoint_noise=0.3, drop_prob=0.1)
        stream = render_pose_stream(generate_piece(cfg, geometry), geometry)
        assert len(stream) >= 100
        again = parse_pose_stream(dump_pose_stream(stream))
        assert again == stream


# ---------------------------------------------------------------------------
# Hand labels
# ---------------------------------------------------------------------------

class TestNormalize:
    def test_two_rights_become_left_right(self):
        fr = PoseFrame(0, 0.0, (hand(RIGHT, 400), hand(RIGHT, 100)))
        out = normalize_hand_labels(fr)
        assert sorted((h.hand, h.box_x_min) for h in out.hands) == [(LEFT, 100), (RIGHT, 400)]

    def test_single_left_unchanged(self):
        fr = PoseFrame(0, 0.0, (hand(LEFT, 10),))
        assert normalize_hand_labels(fr) is fr

    def test_three_hands_keep_most_confident(self):
        fr = PoseFrame(0, 0.0, (hand(RIGHT, 500, 0.9), hand(RIGHT, 50, 0.3), hand(RIGHT, 200, 0.8)))
        out = normalize_hand_labels(fr)
        assert sorted((h.hand, h.box_x_min) for h in out.hands) == [(LEFT, 200), (RIGHT, 500)]

    @settings(max_examples=100, derandomize=True)
    @given(st.lists(st.tuples(st.sampled_from([LEFT, RIGHT]), st.floats(0, 1000),
                              st.floats(0.05, 1.0)), max_size=4))
    def test_idempotent_and_distinct(self, detections):
        fr = PoseFrame(0, 0.0, tuple(hand(lbl, box, c) for lbl, box, c in detections))
        once = normalize_hand_labels(fr)
        assert normalize_hand_labels(once) == once
        labels = [h.hand for h in once.hands]
        assert len(labels) == len(set(labels)) and len(labels) <= 2

    def test_stream_identity_when_clean(self, clean_piece):
        _, stream = clean_piece
        assert normalize_stream(stream) is stream


# ---------------------------------------------------------------------------
# Frame windows
# ---------------------------------------------------------------------------

class TestFrames:
    def test_note_covers_five_frames(self):
        s = empty_stream(50)
        assert frame_window(s, NoteEvent(60, 0.0, 0.2)) == (0, 5)

    def test_short_note_nearest_frame(self):
        s = empty_stream(50)
        # 0.05..0.08 contains no frame time; 0.04 is nearer than 0.08
        assert frame_window(s, NoteEvent(60, 0.05, 0.079)) == (1, 2)
        assert frame_window(s, NoteEvent(60, 0.07, 0.079)) == (2, 3)
        # equidistant: earlier frame
        assert frame_window(s, NoteEvent(60, 0.06, 0.079)) == (1, 2)

    def test_offset_shifts_window(self):
        s = empty_stream(50)
        note = NoteEvent(60, 0.4, 0.6)
        lo, hi = frame_window(s, note)
        assert frame_window(s, note, 0.2) == (lo + 5, hi + 5)

    def test_beyond_stream_end(self):
        s = empty_stream(10)
        assert frames_for_note(s, NoteEvent(60, 5.0, 6.0))[0].frame_index == 9

    def test_non_empty_for_every_note(self, clean_piece):
        piece, stream = clean_piece
        assert all(frames_for_note(stream, n) for n in piece.notes)

    def test_empty_stream(self):
        with pytest.raises(EmptyStream):
            frame_window(PoseStream(25.0, ()), NoteEvent(60, 0.0, 1.0))
