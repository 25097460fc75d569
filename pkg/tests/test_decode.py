import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridgraph.decode import (chunk_video, decode_segments, dual_verify, nms_temporal, offset_segment,
                                read_predictions, write_predictions)
from hybridgraph.errors import ConfigError, ParseError, ValidationError
from hybridgraph.segments import Segment, temporal_iou
from hybridgraph.temporal import TemporalOutputs, build_anchor_bank

from oracles import reference_nms


def outputs(boundary, logits):
    return TemporalOutputs(np.asarray(logits, dtype=float), np.asarray(boundary, dtype=float))


segment_lists = st.lists(
    st.tuples(st.integers(0, 30), st.integers(0, 8), st.integers(0, 2), st.integers(0, 20), st.sampled_from("ab")),
    max_size=10,
).map(lambda rows: [Segment(s, s + l, c, sc / 20, v) for s, l, c, sc, v in rows])


# -- chunking ------------------------------------------------------------------


def test_chunk_examples():
    assert chunk_video(10, 4) == [(0, 4), (4, 4), (8, 2)]
    assert chunk_video(4, 8) == [(0, 4)]
    assert chunk_video(0, 8) == []
    with pytest.raises(ConfigError):
        chunk_video(5, 0)


@given(st.integers(0, 500), st.integers(1, 64))
def test_chunks_partition(total, n):
    covered = []
    for off, ln in chunk_video(total, n):
        assert 1 <= ln <= n
        covered += range(off, off + ln)
    assert covered == list(range(total))


# -- dual verification ---------------------------------------------------------


def test_dual_verify_truth_table():
    A, B = "A", "B"
    assert dual_verify([A, A, B, A, A]) == [A] * 5
    assert dual_verify([A, A, B, B]) == [A, A, B, B]
    assert dual_verify([A]) == [A]
    assert dual_verify([]) == []


@pytest.mark.parametrize("seq", [list("AABAA"), list("AABB"), list("A")])
def test_dual_verify_idempotent(seq):
    once = dual_verify(seq)
    assert dual_verify(once) == once


@given(st.lists(st.integers(0, 3), max_size=30))
def test_dual_verify_no_new_labels(labels):
    out = dual_verify(labels)
    assert len(out) == len(labels)
    assert set(out) <= set(labels)


# -- segment decoding ----------------------------------------------------------


def test_nothing_above_threshold():
    assert decode_segments(outputs([0.1, 0.4, 0.2], np.zeros((3, 2)))) == []


def test_single_block():
    segs = decode_segments(outputs([0.1, 0.7, 0.8, 0.9, 0.2], np.zeros((5, 2))))
    assert [(s.start, s.end) for s in segs] == [(1, 3)]


def test_two_blocks_scalar_recompute(rng):
    bp = [0.9, 0.9, 0.2, 0.8, 0.8]
    logits = rng.standard_normal((5, 3))
    segs = decode_segments(outputs(bp, logits), theta=0.5)
    assert [(s.start, s.end) for s in segs] == [(0, 1), (3, 4)]
    for seg in segs:
        rows = range(seg.start, seg.end + 1)
        means = [sum(1 / (1 + np.exp(-logits[i, c])) for i in rows) / len(rows) for c in range(3)]
        c = max(range(3), key=lambda k: means[k])
        assert seg.class_id == c
        assert abs(seg.score - sum(bp[i] for i in rows) / len(rows) * means[c]) < 1e-12


def test_label_smoothing_splits_runs():
    logits = np.full((6, 2), -5.0)
    logits[:3, 0] = 5.0
    logits[3:, 1] = 5.0
    segs = decode_segments(outputs(np.full(6, 0.9), logits), smooth_labels=True)
    assert [(s.start, s.end, s.class_id) for s in segs] == [(0, 2, 0), (3, 5, 1)]
    # an isolated flip (labels 0,0,0,1,0,0) is absorbed
    flip = np.full((6, 2), -5.0)
    flip[:, 0] = 5.0
    flip[3] = [-5.0, 5.0]
    segs = decode_segments(outputs(np.full(6, 0.9), flip), smooth_labels=True)
    assert [(s.start, s.end, s.class_id) for s in segs] == [(0, 5, 0)]
    assert len(decode_segments(outputs(np.full(6, 0.9), flip), smooth_labels=False)) == 1


@given(st.integers(1, 64), st.integers(0, 2**31), st.booleans())
def test_decode_segments_disjoint(n, seed, smooth):
    r = np.random.default_rng(seed)
    segs = decode_segments(outputs(r.random(n), r.standard_normal((n, 3))), theta=0.5, smooth_labels=smooth)
    spans = sorted((s.start, s.end) for s in segs)
    for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
        assert e0 < s1
    assert all(0 <= s.start <= s.end < n for s in segs)


def test_snap_to_anchor():
    bank = build_anchor_bank(32)
    bp = np.zeros(32)
    bp[3:10] = 0.9
    segs = decode_segments(outputs(bp, np.zeros((32, 2))), bank, snap=True)
    assert len(segs) == 1
    assert (segs[0].start, segs[0].length) in bank.windows


def test_snap_requires_bank():
    with pytest.raises(ConfigError):
        decode_segments(outputs([0.9], [[0.0]]), None, snap=True)


def test_bad_theta():
    with pytest.raises(ConfigError):
        decode_segments(outputs([0.9], [[0.0]]), theta=1.0)


# -- NMS -----------------------------------------------------------------------


def test_nms_trivial():
    s = Segment(0, 3, 1, 0.5)
    assert nms_temporal([s], 0.5) == [s]
    lo, hi = Segment(2, 5, 0, 0.3), Segment(2, 5, 0, 0.8)
    assert nms_temporal([lo, hi], 0.5) == [hi]


@given(segment_lists, st.sampled_from([0.0, 0.3, 0.5, 0.7, 1.0]))
def test_nms_matches_reference(segs, thr):
    kept = nms_temporal(segs, thr)
    assert kept == reference_nms(segs, thr)
    assert all(a.score >= b.score for a, b in zip(kept, kept[1:]))
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.class_id == b.class_id and a.video_id == b.video_id:
                assert temporal_iou(a, b) <= thr


def test_offset_segment():
    s = offset_segment(Segment(1, 4, 2, 0.5), 32, "v")
    assert (s.start, s.end, s.class_id, s.score, s.video_id) == (33, 36, 2, 0.5, "v")


# -- prediction files ----------------------------------------------------------


def test_predictions_round_trip(tmp_path, rng):
    preds = {v: [Segment(int(s), int(s) + 3, int(c), float(sc), v) for s, c, sc in
                 zip(rng.integers(0, 50, 4), rng.integers(0, 4, 4), rng.random(4))] for v in ("b", "a")}
    preds["empty"] = []
    path = tmp_path / "p.csv"
    write_predictions(path, preds)
    back = read_predictions(path)
    assert back == {k: v for k, v in preds.items() if v}
    write_predictions(tmp_path / "q.csv", back)
    assert (tmp_path / "q.csv").read_bytes() == path.read_bytes()


def test_empty_predictions_file(tmp_path):
    write_predictions(tmp_path / "p.csv", {})
    assert (tmp_path / "p.csv").read_text() == "video_id,class_id,start_snippet,end_snippet,score\n"
    assert read_predictions(tmp_path / "p.csv") == {}


@pytest.mark.parametrize("body,line,exc", [
    ("v,0,1,2\n", 2, ParseError),
    ("v,0,1,2,0.5\nv,x,1,2,0.5\n", 3, ParseError),
    ("v,0,5,2,0.5\n", 2, ValidationError),
    ("v,0,1,2,nan\n", 2, ValidationError),
])
def test_prediction_errors_have_line(tmp_path, body, line, exc):
    p = tmp_path / "p.csv"
    p.write_text("video_id,class_id,start_snippet,end_snippet,score\n" + body)
    with pytest.raises(exc, match=f":{line}:"):
        read_predictions(p)


def test_prediction_bad_header(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("a,b\n")
    with pytest.raises(ParseError, match=":1:"):
        read_predictions(p)
