"""Online agent-tube linking driven by an agentness score.

Tubes are grown frame by frame: live tubes, best mean agentness first, each
claim the highest-agentness remaining detection overlapping their latest box
by more than ``lambda_iou``. Unclaimed detections seed new tubes, and a tube
that goes more than ``n_term`` consecutive frames without a match is closed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

DEFAULT_LAMBDA_IOU = 0.5
DEFAULT_TOP_K = 4
DEFAULT_N_TERM = 5
MIN_AGENTNESS = 0.025


@dataclass
class FrameDetection:
    frame: int
    box: tuple[float, float, float, float]
    agentness: float
    class_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValidationError(f"box {self.box} at frame {self.frame} is not well ordered")
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)


@dataclass
class Tube:
    tube_id: int
    entries: list[tuple[int, tuple[float, float, float, float], float]] = field(default_factory=list)
    class_score_sum: np.ndarray | None = None
    n_scored: int = 0
    alive: bool = True
    misses: int = 0

    @property
    def frames(self) -> list[int]:
        return [e[0] for e in self.entries]

    @property
    def last_box(self):
        return self.entries[-1][1]

    @property
    def mean_agentness(self) -> float:
        return float(np.mean([e[2] for e in self.entries]))

    @property
    def class_scores_mean(self) -> np.ndarray:
        if self.class_score_sum is None:
            return np.zeros(0)
        return self.class_score_sum / self.n_scored

    def add(self, det: FrameDetection) -> None:
        self.entries.append((det.frame, tuple(det.box), det.agentness))
        if det.class_scores.size:
            if self.class_score_sum is None:
                self.class_score_sum = np.zeros_like(det.class_scores)
            self.class_score_sum = self.class_score_sum + det.class_scores
            self.n_scored += 1
        self.misses = 0


def box_iou(b1, b2) -> float:
    ix = max(0.0, min(b1[2], b2[2]) - max(b1[0], b2[0]))
    iy = max(0.0, min(b1[3], b2[3]) - max(b1[1], b2[1]))
    inter = ix * iy
    a1 = (b1[2] - b1[0]) * (b1[3] - b1[1])
    a2 = (b2[2] - b2[0]) * (b2[3] - b2[1])
    union = a1 + a2 - inter
    return inter / union if union > 0 else 0.0


def box_nms(dets: Sequence[FrameDetection], iou_thresh: float = 0.5) -> list[FrameDetection]:
    """Greedy agentness NMS for one frame (caller-side pre-filtering)."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].agentness, i))
    kept: list[FrameDetection] = []
    for i in order:
        if all(box_iou(dets[i].box, k.box) <= iou_thresh for k in kept):
            kept.append(dets[i])
    return kept


def prefilter(dets: Sequence[FrameDetection], min_agentness: float = MIN_AGENTNESS, nms_iou: float = 0.5):
    return box_nms([d for d in dets if d.agentness >= min_agentness], nms_iou)


def link_step(
    tubes: list[Tube],
    detections: Sequence[FrameDetection],
    lambda_iou: float = DEFAULT_LAMBDA_IOU,
    n_term: int = DEFAULT_N_TERM,
    next_id: int | None = None,
) -> list[Tube]:
    """Advance the tube set by one frame; mutates and returns ``tubes``.

    Only alive tubes take part. New tubes get ids ``next_id, next_id + 1, ...``
    (default: one past the current maximum id).
    """
    if next_id is None:
        next_id = 1 + max((t.tube_id for t in tubes), default=-1)
    pool = sorted(range(len(detections)), key=lambda i: (-detections[i].agentness, i))
    live = [t for t in tubes if t.alive]
    live.sort(key=lambda t: (-t.mean_agentness, t.tube_id))
    for tube in live:
        chosen = None
        for i in pool:
            if box_iou(tube.last_box, detections[i].box) > lambda_iou:
                chosen = i
                break
        if chosen is None:
            tube.misses += 1
            if tube.misses > n_term:
                tube.alive = False
        else:
            pool.remove(chosen)
            tube.add(detections[chosen])
    for i in sorted(pool):
        t = Tube(next_id)
        t.add(detections[i])
        tubes.append(t)
        next_id += 1
    return tubes


class TubeLinker:
    """Stateful wrapper over :func:`link_step` for one video stream."""

    def __init__(self, lambda_iou: float = DEFAULT_LAMBDA_IOU, n_term: int = DEFAULT_N_TERM):
        self.lambda_iou = lambda_iou
        self.n_term = n_term
        self.tubes: list[Tube] = []
        self._next_id = 0

    def step(self, detections: Sequence[FrameDetection]) -> None:
        before = len(self.tubes)
        link_step(self.tubes, detections, self.lambda_iou, self.n_term, self._next_id)
        self._next_id += len(self.tubes) - before

    def run(self, frames: dict[int, Sequence[FrameDetection]], first: int, last: int) -> list[Tube]:
        for f in range(first, last + 1):
            self.step(frames.get(f, []))
        return self.tubes


def label_tube(tube: Tube, k: int = DEFAULT_TOP_K) -> list[int]:
    """The ``k`` classes with highest mean score over the tube (ties: lower id)."""
    mean = tube.class_scores_mean
    if k > mean.size:
        raise ConfigError(f"k={k} exceeds the {mean.size} available classes")
    order = sorted(range(mean.size), key=lambda c: (-mean[c], c))
    return order[:k]


def interpolate_tube(tube: Tube) -> Tube:
    """Copy of ``tube`` with linearly interpolated boxes in every frame gap."""
    if len(tube.entries) < 2:
        return tube
    entries = [tube.entries[0]]
    for (f0, b0, s0), (f1, b1, s1) in zip(tube.entries, tube.entries[1:]):
        for f in range(f0 + 1, f1):
            t = (f - f0) / (f1 - f0)
            box = tuple(float(p + t * (q - p)) for p, q in zip(b0, b1))
            entries.append((f, box, s0 + t * (s1 - s0)))
        entries.append((f1, b1, s1))
    return Tube(tube.tube_id, entries, tube.class_score_sum, tube.n_scored, tube.alive, tube.misses)


# -- detections CSV ---------------------------------------------------------------


def read_detections(path) -> dict[str, dict[int, list[FrameDetection]]]:
    """Parse ``video_id,frame,x1,y1,x2,y2,agentness,score_0..score_{C-1}``."""
    path = Path(path)
    out: dict[str, dict[int, list[FrameDetection]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        base = ["video_id", "frame", "x1", "y1", "x2", "y2", "agentness"]
        if header is None or header[:7] != base or any(h != f"score_{i}" for i, h in enumerate(header[7:])):
            raise ParseError("expected header video_id,frame,x1,y1,x2,y2,agentness,score_0..", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, lineno)
            try:
                frame = int(row[1])
                box = tuple(float(v) for v in row[2:6])
                agentness = float(row[6])
                scores = np.array([float(v) for v in row[7:]])
                det = FrameDetection(frame, box, agentness, scores)
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            out.setdefault(row[0], {}).setdefault(frame, []).append(det)
    return out
