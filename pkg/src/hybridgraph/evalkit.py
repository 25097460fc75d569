"""Temporal detection scoring: AP/mAP over IoU thresholds and frame-level P/R/F1."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .segments import Segment, temporal_iou

PRESETS = {
    "road": (0.1, 0.2, 0.3, 0.4, 0.5),
    "thumos": (0.3, 0.4, 0.5, 0.6, 0.7),
    "activitynet": (0.5, 0.7, 0.95),
}

__all__ = ["PRESETS", "EvalReport", "PRF1Report", "average_precision", "mean_ap", "prf1", "temporal_iou"]


def _ranked(dets: Sequence[Segment]) -> list[Segment]:
    return sorted(dets, key=lambda d: (-d.score, d.start))


def match_detections(dets: Sequence[Segment], gts: Sequence[Segment], theta: float) -> list[bool]:
    """TP flags for ``dets`` in ranked order; each GT is consumed at most once."""
    used = [False] * len(gts)
    by_video: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_video.setdefault(g.video_id, []).append(j)
    flags = []
    for d in _ranked(dets):
        best, best_iou = -1, -1.0
        for j in by_video.get(d.video_id, ()):
            if used[j]:
                continue
            iou = temporal_iou(d, gts[j])
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= theta:
            used[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(dets: Sequence[Segment], gts: Sequence[Segment], theta: float) -> float:
    """All-point interpolated AP for one class.

    Detections and ground truth only match within the same ``video_id``.
    """
    if not gts:
        return 0.0
    tp = np.array(match_detections(dets, gts, theta), dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    thresholds: list[float]
    classes: list[int]
    per_class_ap: dict[int, list[float]]
    map_per_threshold: list[float]
    average_map: float
    n_gt: dict[int, int]
    n_det: dict[int, int]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        d["n_gt"] = {str(k): v for k, v in self.n_gt.items()}
        d["n_det"] = {str(k): v for k, v in self.n_det.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        heads = ["class", "n_gt", "n_det"] + [f"@{t:g}" for t in self.thresholds] + ["avg"]
        rows = []
        for c in self.classes:
            aps = self.per_class_ap[c]
            rows.append([str(c), str(self.n_gt.get(c, 0)), str(self.n_det.get(c, 0))]
                        + [f"{100 * a:.1f}" for a in aps] + [f"{100 * np.mean(aps):.1f}"])
        rows.append(["mAP", str(sum(self.n_gt.values())), str(sum(self.n_det.values()))]
                    + [f"{100 * m:.1f}" for m in self.map_per_threshold] + [f"{100 * self.average_map:.1f}"])
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(heads)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(heads, widths))]
        lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        return "\n".join(lines) + "\n"


def _flatten(segs: Mapping[str, Iterable[Segment]] | Iterable[Segment]) -> list[Segment]:
    if isinstance(segs, Mapping):
        out = []
        for vid, lst in segs.items():
            for s in lst:
                out.append(s if s.video_id == vid else Segment(s.start, s.end, s.class_id, s.score, vid))
        return out
    return list(segs)


def resolve_thresholds(preset: str | None = None, thresholds: Sequence[float] | None = None) -> list[float]:
    if thresholds:
        out = [float(t) for t in thresholds]
    elif preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        out = list(PRESETS[preset])
    else:
        raise ConfigError("either a preset or explicit thresholds are required")
    for t in out:
        if not 0.0 < t <= 1.0:
            raise ConfigError(f"IoU threshold {t} outside (0, 1]")
    return out


def mean_ap(dets, gts, thresholds: Sequence[float]) -> EvalReport:
    """Per-class AP at each threshold; classes without ground truth are left out of the mean."""
    thresholds = resolve_thresholds(thresholds=thresholds)
    dets = _flatten(dets)
    gts = _flatten(gts)
    by_cls_gt: dict[int, list[Segment]] = {}
    by_cls_det: dict[int, list[Segment]] = {}
    for g in gts:
        by_cls_gt.setdefault(g.class_id, []).append(g)
    for d in dets:
        by_cls_det.setdefault(d.class_id, []).append(d)
    classes = sorted(by_cls_gt)
    per_class = {c: [average_precision(by_cls_det.get(c, []), by_cls_gt[c], t) for t in thresholds] for c in classes}
    if classes:
        per_t = [float(np.mean([per_class[c][i] for c in classes])) for i in range(len(thresholds))]
    else:
        per_t = [0.0] * len(thresholds)
    return EvalReport(
        thresholds=list(thresholds),
        classes=classes,
        per_class_ap=per_class,
        map_per_threshold=per_t,
        average_map=float(np.mean(per_t)),
        n_gt={c: len(v) for c, v in sorted(by_cls_gt.items())},
        n_det={c: len(v) for c, v in sorted(by_cls_det.items())},
    )


@dataclass
class PRF1Report:
    classes: list
    precision: dict
    recall: dict
    f1: dict
    accuracy: dict
    support: dict
    macro: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)
    overall_accuracy: float = 0.0


def prf1(pred_labels: Sequence, gt_labels: Sequence) -> PRF1Report:
    """One-vs-rest precision, recall, F1 and accuracy per class, with macro and support-weighted means."""
    if len(pred_labels) != len(gt_labels):
        raise DimensionError(f"prediction length {len(pred_labels)} != ground truth length {len(gt_labels)}")
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    n = len(gt)
    classes = sorted(set(pred.tolist()) | set(gt.tolist()))
    P, R, F, A, S = {}, {}, {}, {}, {}
    for c in classes:
        tp = int(np.sum((pred == c) & (gt == c)))
        fp = int(np.sum((pred == c) & (gt != c)))
        fn = int(np.sum((pred != c) & (gt == c)))
        tn = n - tp - fp - fn
        P[c] = tp / (tp + fp) if tp + fp else 0.0
        R[c] = tp / (tp + fn) if tp + fn else 0.0
        F[c] = 2 * P[c] * R[c] / (P[c] + R[c]) if P[c] + R[c] else 0.0
        A[c] = (tp + tn) / n if n else 0.0
        S[c] = tp + fn
    total = sum(S.values())

    def means(weighted):
        out = {}
        for name, d in (("precision", P), ("recall", R), ("f1", F), ("accuracy", A)):
            if not classes:
                out[name] = 0.0
            elif weighted:
                out[name] = sum(d[c] * S[c] for c in classes) / total if total else 0.0
            else:
                out[name] = sum(d.values()) / len(classes)
        return out

    return PRF1Report(classes, P, R, F, A, S, means(False), means(True),
                      float(np.mean(pred == gt)) if n else 0.0)
