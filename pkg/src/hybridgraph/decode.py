"""From per-snippet network outputs to scored activity segments."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .segments import Segment, temporal_iou
from .temporal import AnchorBank, TemporalOutputs, match_anchor

PRED_HEADER = ["video_id", "class_id", "start_snippet", "end_snippet", "score"]


def chunk_video(n_total: int, n: int) -> list[tuple[int, int]]:
    """Split ``[0, n_total)`` into consecutive ``(offset, length)`` chunks of at most ``n``."""
    if n < 1:
        raise ConfigError(f"chunk length must be >= 1, got {n}")
    return [(off, min(n, n_total - off)) for off in range(0, n_total, n)]


def dual_verify(labels: Sequence) -> list:
    """Absorb isolated label flips sandwiched between two equal labels.

    Single left-to-right pass: at each interior position whose label differs
    from its (already smoothed) predecessor, the predecessor's label is kept
    if the next snippet agrees with it; otherwise a new activity starts.
    """
    out = list(labels)
    for i in range(1, len(out) - 1):
        if out[i - 1] != out[i] and out[i - 1] == out[i + 1]:
            out[i] = out[i - 1]
    return out


def _runs(on: np.ndarray) -> list[tuple[int, int]]:
    runs = []
    start = None
    for i, v in enumerate(on):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(on) - 1))
    return runs


def _split_by_label(run: tuple[int, int], labels: Sequence[int]) -> list[tuple[int, int]]:
    s, e = run
    parts = []
    cur = s
    for i in range(s + 1, e + 1):
        if labels[i] != labels[i - 1]:
            parts.append((cur, i - 1))
            cur = i
    parts.append((cur, e))
    return parts


def decode_segments(
    outputs: TemporalOutputs,
    bank: AnchorBank | None = None,
    theta: float = 0.5,
    snap: bool = False,
    smooth_labels: bool = False,
) -> list[Segment]:
    """Threshold boundary probabilities into runs and label each run.

    Each maximal run with ``boundary >= theta`` is a candidate. With
    ``smooth_labels`` the per-snippet argmax labels are passed through
    :func:`dual_verify` and runs are additionally split where the smoothed
    label changes. With ``snap`` the run is replaced by the best-IoU anchor.
    The class is the argmax of the mean class probability over the segment and
    the score is ``mean(boundary) * mean(class prob)`` over the segment.
    """
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must lie in (0, 1), got {theta}")
    bp = np.asarray(outputs.boundary_probs, dtype=np.float64)
    probs = outputs.class_probs
    runs = _runs(bp >= theta)
    if smooth_labels and runs:
        labels = dual_verify([int(c) for c in np.argmax(probs, axis=1)])
        runs = [part for r in runs for part in _split_by_label(r, labels)]
    segments = []
    for s, e in runs:
        if snap:
            if bank is None:
                raise ConfigError("snapping requires an anchor bank")
            if bank.length != len(bp):
                bank = bank.clipped(len(bp))
            mask = np.zeros(len(bp), dtype=bool)
            mask[s:e + 1] = True
            idx, _ = match_anchor(mask, bank)
            st, ln = bank.windows[idx]
            s, e = st, st + ln - 1
        cls_mean = probs[s:e + 1].mean(axis=0)
        c = int(np.argmax(cls_mean))
        score = float(bp[s:e + 1].mean() * cls_mean[c])
        segments.append(Segment(s, e, c, score))
    return segments


def nms_temporal(segments: Iterable[Segment], iou_thresh: float) -> list[Segment]:
    """Greedy per-class (and per-video) suppression in descending score order."""
    if not 0.0 <= iou_thresh <= 1.0:
        raise ConfigError(f"iou_thresh must lie in [0, 1], got {iou_thresh}")
    ordered = sorted(segments, key=lambda s: -s.score)
    kept: list[Segment] = []
    for seg in ordered:
        if all(
            k.class_id != seg.class_id or k.video_id != seg.video_id or temporal_iou(k, seg) <= iou_thresh
            for k in kept
        ):
            kept.append(seg)
    return kept


def offset_segment(seg: Segment, offset: int, video_id: str | None = None) -> Segment:
    return Segment(seg.start + offset, seg.end + offset, seg.class_id, seg.score,
                   seg.video_id if video_id is None else video_id)


# -- prediction CSV ---------------------------------------------------------------


def write_predictions(path, predictions: Mapping[str, Sequence[Segment]]) -> None:
    """Write ``video_id,class_id,start_snippet,end_snippet,score`` rows, videos in key order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for vid in sorted(predictions):
            for seg in predictions[vid]:
                w.writerow([vid, seg.class_id, seg.start, seg.end, repr(float(seg.score))])


def read_predictions(path) -> dict[str, list[Segment]]:
    path = Path(path)
    out: dict[str, list[Segment]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PRED_HEADER:
            raise ParseError(f"expected header {','.join(PRED_HEADER)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PRED_HEADER):
                raise ParseError(f"expected {len(PRED_HEADER)} fields, got {len(row)}", path, lineno)
            try:
                vid, c, s, e, score = row[0], int(row[1]), int(row[2]), int(row[3]), float(row[4])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if s < 0 or s > e or c < 0 or not np.isfinite(score):
                raise ValidationError(f"{path}:{lineno}: invalid segment row {row}")
            out.setdefault(vid, []).append(Segment(s, e, c, score, vid))
    return out
