"""Temporal segment record and interval overlap."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Segment:
    """An activity instance over inclusive snippet indices ``[start, end]``."""

    start: int
    end: int
    class_id: int
    score: float = 1.0
    video_id: str = ""

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def temporal_iou(s1: Segment, s2: Segment) -> float:
    """IoU of two inclusive snippet intervals."""
    inter = min(s1.end, s2.end) - max(s1.start, s2.start) + 1
    if inter <= 0:
        return 0.0
    return inter / (s1.length + s2.length - inter)
