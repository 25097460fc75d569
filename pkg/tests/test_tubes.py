import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridgraph.errors import ConfigError, ParseError, ValidationError
from hybridgraph.tubes import (FrameDetection, Tube, TubeLinker, box_iou, box_nms, interpolate_tube, label_tube,
                               link_step, prefilter, read_detections)

from scenarios import EXPECTED_LABELS, EXPECTED_TUBES, OCCLUDED, occluded_box, three_object_frames


def grid_iou(b1, b2):
    """Count unit cells of integer boxes."""
    g = np.zeros((2, 40, 40), dtype=bool)
    for k, (x1, y1, x2, y2) in enumerate((b1, b2)):
        g[k, int(x1):int(x2), int(y1):int(y2)] = True
    return np.count_nonzero(g[0] & g[1]) / np.count_nonzero(g[0] | g[1])


int_boxes = st.tuples(st.integers(0, 30), st.integers(0, 30), st.integers(1, 9), st.integers(1, 9)).map(
    lambda t: (float(t[0]), float(t[1]), float(t[0] + t[2]), float(t[1] + t[3])))


def det(box, a, f=0, scores=()):
    return FrameDetection(f, box, a, np.asarray(scores, dtype=float))


# -- box IoU -------------------------------------------------------------------


def test_box_iou_examples():
    assert box_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == 1 / 7


@given(int_boxes, int_boxes)
def test_box_iou_grid_oracle(b1, b2):
    assert box_iou(b1, b2) == grid_iou(b1, b2)
    assert box_iou(b1, b2) == box_iou(b2, b1)


def test_bad_box_rejected():
    with pytest.raises(ValidationError):
        det((5, 0, 1, 1), 0.5)


def test_prefilter_drops_low_agentness_and_duplicates():
    dets = [det((0, 0, 10, 10), 0.9), det((0, 0, 10, 9), 0.8), det((20, 20, 30, 30), 0.01)]
    assert prefilter(dets) == [dets[0]]
    assert box_nms(dets, 0.95) == dets


# -- linking -------------------------------------------------------------------


def test_one_tube_one_detection():
    tubes = link_step([], [det((0, 0, 10, 10), 0.9)])
    tubes = link_step(tubes, [det((1, 0, 11, 10), 0.8, 1)])
    assert len(tubes) == 1 and tubes[0].frames == [0, 1]


@pytest.mark.parametrize("n_term", [0, 1, 5])
def test_termination_after_n_term_plus_one_misses(n_term):
    tubes = link_step([], [det((0, 0, 10, 10), 0.9)])
    for _ in range(n_term):
        link_step(tubes, [], n_term=n_term)
        assert tubes[0].alive
    link_step(tubes, [], n_term=n_term)
    assert not tubes[0].alive
    # a dead tube never links again
    link_step(tubes, [det((0, 0, 10, 10), 0.9)], n_term=n_term)
    assert tubes[0].frames == [0] and len(tubes) == 2


def make_tube(tid, box, agentness):
    t = Tube(tid)
    t.add(det(box, agentness))
    return t


@pytest.mark.parametrize("a_first", [True, False])
def test_crossing_greedy_order(a_first):
    # tube A at (0,0,10,10), tube B at (2,0,12,10); d1 overlaps both (IoU .82 each),
    # d2 coincides with B and overlaps A with IoU .67.
    A = make_tube(0, (0, 0, 10, 10), 0.9 if a_first else 0.6)
    B = make_tube(1, (2, 0, 12, 10), 0.6 if a_first else 0.9)
    d1 = det((1, 0, 11, 10), 0.95, 1)
    d2 = det((2, 0, 12, 10), 0.5, 1)
    link_step([A, B], [d2, d1])
    # the higher-mean tube goes first and takes the highest-agentness overlapping detection
    first, second = (A, B) if a_first else (B, A)
    assert first.entries[-1][1] == d1.box
    assert second.entries[-1][1] == d2.box


def test_equal_agentness_ties_use_creation_order():
    A = make_tube(0, (0, 0, 10, 10), 0.5)
    B = make_tube(1, (0, 0, 10, 10), 0.5)
    d1, d2 = det((0, 0, 10, 10), 0.7, 1), det((0, 0, 10, 9.5), 0.7, 1)
    link_step([B, A], [d1, d2])
    assert A.last_box == d1.box and B.last_box == d2.box


@given(st.lists(st.lists(st.tuples(int_boxes, st.floats(0.05, 1.0)), max_size=5), min_size=1, max_size=8),
       st.floats(0.1, 0.9))
def test_no_detection_claimed_twice(frames, lam):
    tubes = []
    for f, rows in enumerate(frames):
        dets = [det(b, a, f) for b, a in rows]
        before = {t.tube_id: len(t.entries) for t in tubes}
        link_step(tubes, dets, lam, 2)
        # every detection lands in exactly one tube and no tube takes two in one frame
        added = [len(t.entries) - before.get(t.tube_id, 0) for t in tubes]
        assert sum(added) == len(dets) and max(added, default=0) <= 1
        for t in tubes:
            assert all(a < b for a, b in zip(t.frames, t.frames[1:]))


def test_linker_deterministic():
    a = TubeLinker(0.5, 5).run(three_object_frames(), 0, 19)
    b = TubeLinker(0.5, 5).run(three_object_frames(), 0, 19)
    assert [(t.tube_id, t.entries) for t in a] == [(t.tube_id, t.entries) for t in b]


def test_scripted_scenario():
    tubes = TubeLinker(0.5, 5).run(three_object_frames(), 0, 19)
    assert {t.tube_id: (t.frames, t.alive) for t in tubes} == EXPECTED_TUBES
    assert {t.tube_id: label_tube(t, 4) for t in tubes} == EXPECTED_LABELS
    occ = next(t for t in tubes if t.tube_id == 1)
    full = interpolate_tube(occ)
    assert full.frames == list(range(20))
    boxes = dict((f, b) for f, b, _ in full.entries)
    for f in OCCLUDED:
        lo, hi = occluded_box(5), occluded_box(9)
        assert all(min(p, q) <= v <= max(p, q) for v, p, q in zip(boxes[f], lo, hi))
        assert np.allclose(boxes[f], occluded_box(f))


# -- labels and interpolation --------------------------------------------------


def test_label_single_frame():
    t = make_tube(0, (0, 0, 1, 1), 0.5)
    t.add(det((0, 0, 1, 1), 0.5, 1, [0.2, 0.9, 0.4, 0.1, 0.3]))
    assert label_tube(t, 4) == [1, 2, 4, 0]
    assert label_tube(t, 1) == [1]
    with pytest.raises(ConfigError):
        label_tube(t, 6)


@given(st.integers(1, 10), st.integers(4, 8), st.integers(0, 2**31))
def test_label_full_sort_oracle(n_frames, C, seed):
    r = np.random.default_rng(seed)
    t = Tube(0)
    scores = r.integers(0, 5, size=(n_frames, C)) / 4.0  # coarse values force ties
    for f in range(n_frames):
        t.add(det((0, 0, 1, 1), 0.5, f, scores[f]))
    mean = scores.mean(axis=0)
    oracle = sorted(range(C), key=lambda c: (-mean[c], c))[:4]
    assert label_tube(t) == oracle


def test_interpolate_midpoint_and_no_gap():
    t = Tube(0)
    t.add(det((0, 0, 2, 2), 0.4, 0))
    t.add(det((2, 2, 4, 4), 0.8, 2))
    full = interpolate_tube(t)
    assert full.entries[1][0] == 1 and full.entries[1][1] == (1.0, 1.0, 3.0, 3.0)
    assert abs(full.entries[1][2] - 0.6) < 1e-15
    u = Tube(1)
    u.add(det((0, 0, 2, 2), 0.4, 0))
    u.add(det((0, 0, 2, 2), 0.4, 1))
    assert interpolate_tube(u).entries == u.entries


@given(st.lists(st.tuples(st.integers(1, 5), int_boxes), min_size=2, max_size=6))
def test_interpolated_boxes_bracketed(steps):
    t = Tube(0)
    f = 0
    for gap, box in steps:
        f += gap
        t.add(det(box, 0.5, f))
    full = interpolate_tube(t)
    assert full.frames == list(range(full.frames[0], full.frames[-1] + 1))
    known = {fr: b for fr, b, _ in t.entries}
    frames = sorted(known)
    for fr, box, _ in full.entries:
        if fr in known:
            assert box == known[fr]
            continue
        lo = max(k for k in frames if k < fr)
        hi = min(k for k in frames if k > fr)
        for v, p, q in zip(box, known[lo], known[hi]):
            assert min(p, q) <= v <= max(p, q)


# -- detections file -----------------------------------------------------------


def test_read_detections(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("video_id,frame,x1,y1,x2,y2,agentness,score_0,score_1\n"
                 "v,0,0,0,10,10,0.9,0.1,0.8\nv,1,1,0,11,10,0.8,0.2,0.7\n")
    dets = read_detections(p)
    assert sorted(dets["v"]) == [0, 1]
    assert dets["v"][1][0].box == (1.0, 0.0, 11.0, 10.0)
    assert dets["v"][0][0].class_scores.tolist() == [0.1, 0.8]


@pytest.mark.parametrize("body,line", [("v,0,0,0,10,10,0.9,0.1\n", 2), ("v,0,0,0,10,10,0.9,0.1,x\n", 2),
                                       ("v,0,0,0,10,10,0.9,0.1,0.2\nv,0,9,0,1,10,0.9,0.1,0.2\n", 3)])
def test_read_detections_errors(tmp_path, body, line):
    p = tmp_path / "d.csv"
    p.write_text("video_id,frame,x1,y1,x2,y2,agentness,score_0,score_1\n" + body)
    with pytest.raises(ParseError, match=f":{line}:"):
        read_detections(p)
