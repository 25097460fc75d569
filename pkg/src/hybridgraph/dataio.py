"""Feature/annotation files and the seeded synthetic corpus generator.

Feature files are line-delimited JSON, one per video: a header line
``{"video_id", "n_snippets", "feature_dim", "snippet_len_frames"}`` followed by
one record per snippet ``{"snippet_index", "scene_feature", "agents": [{"label_id",
"feature"}]}``. Floats are written with ``repr`` precision, so reading back is
bit exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, ValidationError
from .scenegraph import AgentNode, SceneSnippet
from .segments import Segment

GT_HEADER = ["video_id", "class_id", "start_snippet", "end_snippet"]
FEATURE_SUFFIX = ".jsonl"


@dataclass
class VideoFeatureFile:
    video_id: str
    n_snippets: int
    feature_dim: int
    snippet_len_frames: int
    snippets: list[SceneSnippet] = field(default_factory=list)


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_features(path, video: VideoFeatureFile) -> None:
    if len(video.snippets) != video.n_snippets:
        raise SchemaError(f"{video.video_id}: header says {video.n_snippets} snippets, got {len(video.snippets)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps({
            "video_id": video.video_id,
            "n_snippets": video.n_snippets,
            "feature_dim": video.feature_dim,
            "snippet_len_frames": video.snippet_len_frames,
        }) + "\n")
        for s in video.snippets:
            fh.write(_dumps({
                "snippet_index": s.snippet_index,
                "scene_feature": [float(v) for v in s.scene_feature],
                "agents": [{"label_id": int(a.label_id), "feature": [float(v) for v in a.feature]} for a in s.agents],
            }) + "\n")


def _vector(raw, dim, path, lineno, what) -> np.ndarray:
    if not isinstance(raw, list):
        raise ParseError(f"{what} must be a list of numbers", path, lineno)
    if len(raw) != dim:
        raise SchemaError(f"{path}:{lineno}: {what} has length {len(raw)}, header feature_dim is {dim}")
    try:
        vec = np.array(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"{what} contains non-numeric values", path, lineno) from None
    if not np.all(np.isfinite(vec)):
        raise SchemaError(f"{path}:{lineno}: {what} contains non-finite values")
    return vec


def _int_field(obj, key, path, lineno) -> int:
    v = obj.get(key) if isinstance(obj, dict) else None
    if not isinstance(v, int) or isinstance(v, bool):
        raise ParseError(f"field {key!r} missing or not an integer", path, lineno)
    return v


def read_features(path) -> VideoFeatureFile:
    """Parse one feature file; errors carry ``path:line`` context."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty feature file", path, 1)

    def load(i):
        try:
            return json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON ({exc.msg})", path, i + 1) from None

    header = load(0)
    if not isinstance(header, dict) or not isinstance(header.get("video_id"), str):
        raise ParseError("header must be an object with a string video_id", path, 1)
    n = _int_field(header, "n_snippets", path, 1)
    dim = _int_field(header, "feature_dim", path, 1)
    slen = _int_field(header, "snippet_len_frames", path, 1)
    if n < 0 or dim < 1:
        raise SchemaError(f"{path}:1: invalid n_snippets={n} or feature_dim={dim}")
    if len(lines) - 1 != n:
        raise ParseError(f"header declares {n} snippets but file has {len(lines) - 1} records", path, len(lines))
    snippets = []
    for i in range(1, n + 1):
        rec = load(i)
        if not isinstance(rec, dict):
            raise ParseError("snippet record must be an object", path, i + 1)
        idx = _int_field(rec, "snippet_index", path, i + 1)
        if idx != i - 1:
            raise SchemaError(f"{path}:{i + 1}: snippet_index {idx} out of sequence (expected {i - 1})")
        scene = _vector(rec.get("scene_feature"), dim, path, i + 1, "scene_feature")
        agents_raw = rec.get("agents", [])
        if not isinstance(agents_raw, list):
            raise ParseError("agents must be a list", path, i + 1)
        agents = []
        for a in agents_raw:
            label = _int_field(a, "label_id", path, i + 1)
            if label < 0:
                raise SchemaError(f"{path}:{i + 1}: negative agent label_id {label}")
            agents.append(AgentNode(label, _vector(a.get("feature"), dim, path, i + 1, "agent feature")))
        snippets.append(SceneSnippet(idx, scene, agents))
    return VideoFeatureFile(header["video_id"], n, dim, slen, snippets)


def write_corpus(directory, videos: Sequence[VideoFeatureFile]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for v in videos:
        write_features(directory / f"{v.video_id}{FEATURE_SUFFIX}", v)


def read_corpus(directory) -> list[VideoFeatureFile]:
    """All feature files in ``directory`` (sorted by file name)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"feature directory {directory} does not exist")
    return [read_features(p) for p in sorted(directory.glob(f"*{FEATURE_SUFFIX}"))]


def write_annotations(path, annotations: Mapping[str, Sequence[Segment]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GT_HEADER)
        for vid in sorted(annotations):
            for s in annotations[vid]:
                w.writerow([vid, s.class_id, s.start, s.end])


def read_annotations(path, n_snippets: Mapping[str, int] | None = None) -> dict[str, list[Segment]]:
    """Ground-truth CSV -> ``{video_id: [Segment]}``, validated row by row.

    When ``n_snippets`` is given, each row's video must be known and its end
    index must lie inside the video.
    """
    path = Path(path)
    out: dict[str, list[Segment]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != GT_HEADER:
            raise ParseError(f"expected header {','.join(GT_HEADER)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(GT_HEADER):
                raise ParseError(f"expected {len(GT_HEADER)} fields, got {len(row)}", path, lineno)
            try:
                vid, c, s, e = row[0], int(row[1]), int(row[2]), int(row[3])
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            if c < 0 or s < 0 or s > e:
                raise ValidationError(f"{path}: row {lineno}: invalid segment (class {c}, start {s}, end {e})")
            if n_snippets is not None:
                if vid not in n_snippets:
                    raise ValidationError(f"{path}: row {lineno}: unknown video {vid!r}")
                if e >= n_snippets[vid]:
                    raise ValidationError(
                        f"{path}: row {lineno}: end {e} >= n_snippets {n_snippets[vid]} of video {vid!r}")
            out.setdefault(vid, []).append(Segment(s, e, c, 1.0, vid))
    return out


# -- synthetic corpus -------------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_videos: int = 200
    n_test_videos: int = 50
    n_snippets_min: int = 32
    n_snippets_max: int = 32
    n_classes: int = 4
    feature_dim: int = 16
    agents_min: int = 1
    agents_max: int = 4
    n_agent_labels: int = 3
    signature_scale: float = 4.0
    noise_scale: float = 1.0
    activities_min: int = 1
    activities_max: int = 2
    activity_len_min: int = 4
    activity_len_max: int = 16
    min_gap: int = 1
    snippet_len_frames: int = 24
    seed: int = 7

    def __post_init__(self):
        for lo, hi in (("n_snippets_min", "n_snippets_max"), ("agents_min", "agents_max"),
                       ("activities_min", "activities_max"), ("activity_len_min", "activity_len_max")):
            if getattr(self, lo) > getattr(self, hi):
                raise ConfigError(f"{lo}={getattr(self, lo)} exceeds {hi}={getattr(self, hi)}")
        if self.signature_scale <= 0 or self.noise_scale <= 0:
            raise ConfigError("signature_scale and noise_scale must be > 0")
        if self.n_classes > self.feature_dim:
            raise ConfigError(f"{self.n_classes} orthogonal signatures need feature_dim >= n_classes")
        if min(self.n_snippets_min, self.activity_len_min, self.n_classes, self.n_agent_labels) < 1:
            raise ConfigError("lengths and class counts must be >= 1")
        if self.agents_min < 0 or self.activities_min < 0 or self.min_gap < 0:
            raise ConfigError("counts must be non-negative")
        worst = self.activities_max * self.activity_len_min + max(0, self.activities_max - 1) * self.min_gap
        if worst > self.n_snippets_min:
            raise ConfigError(
                f"{self.activities_max} activities of length >= {self.activity_len_min} cannot fit without overlap "
                f"in {self.n_snippets_min} snippets; reduce activities_max or activity_len_min")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def class_signatures(rng: np.random.Generator, n_classes: int, dim: int) -> np.ndarray:
    """``(n_classes, dim)`` orthonormal rows."""
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    return q.T.copy()


def _place_activities(rng, n: int, cfg: SyntheticConfig) -> list[tuple[int, int, int]]:
    k = int(rng.integers(cfg.activities_min, cfg.activities_max + 1))
    if k == 0:
        return []
    lengths = None
    for _ in range(100):
        cand = rng.integers(cfg.activity_len_min, cfg.activity_len_max + 1, size=k)
        if cand.sum() + (k - 1) * cfg.min_gap <= n:
            lengths = cand
            break
    if lengths is None:
        lengths = np.full(k, cfg.activity_len_min)
    free = n - int(lengths.sum()) - (k - 1) * cfg.min_gap
    # random composition of the free snippets into k + 1 slack slots
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    slack = np.diff(np.concatenate([[0], cuts, [free]]))
    out, pos = [], 0
    for i in range(k):
        pos += int(slack[i])
        c = int(rng.integers(cfg.n_classes))
        out.append((pos, pos + int(lengths[i]) - 1, c))
        pos += int(lengths[i]) + cfg.min_gap
    return out


def _make_video(rng, video_id: str, cfg: SyntheticConfig, sig: np.ndarray):
    n = int(rng.integers(cfg.n_snippets_min, cfg.n_snippets_max + 1))
    acts = _place_activities(rng, n, cfg)
    label = np.full(n, -1)
    for s, e, c in acts:
        label[s:e + 1] = c
    D = cfg.feature_dim
    snippets = []
    for i in range(n):
        shift = cfg.signature_scale * sig[label[i]] if label[i] >= 0 else 0.0
        scene = cfg.noise_scale * rng.standard_normal(D) + shift
        n_agents = int(rng.integers(cfg.agents_min, cfg.agents_max + 1))
        agents = []
        for _ in range(n_agents):
            lab = int(rng.integers(cfg.n_agent_labels))
            agents.append(AgentNode(lab, cfg.noise_scale * rng.standard_normal(D) + shift))
        snippets.append(SceneSnippet(i, scene, agents))
    video = VideoFeatureFile(video_id, n, D, cfg.snippet_len_frames, snippets)
    segs = [Segment(s, e, c, 1.0, video_id) for s, e, c in acts]
    return video, segs, label


def nearest_centroid_accuracy(videos, labels, centroids: np.ndarray) -> float:
    """Fraction of activity snippets whose scene feature is nearest its class centroid."""
    hits = total = 0
    for v, lab in zip(videos, labels):
        for s, c in zip(v.snippets, lab):
            if c < 0:
                continue
            d = np.sum((centroids - s.scene_feature) ** 2, axis=1)
            hits += int(np.argmin(d) == c)
            total += 1
    return hits / total if total else 1.0


def generate_split(rng, prefix: str, count: int, cfg: SyntheticConfig, sig: np.ndarray):
    videos, ann, labels = [], {}, []
    for i in range(count):
        vid = f"{prefix}_{i:04d}"
        v, segs, lab = _make_video(rng, vid, cfg, sig)
        videos.append(v)
        ann[vid] = segs
        labels.append(lab)
    return videos, ann, labels


def gen_synthetic(cfg: SyntheticConfig, out_dir) -> dict:
    """Write ``train/`` (and ``test/`` when requested) splits under ``out_dir``.

    Each split holds ``features/<video_id>.jsonl`` and ``annotations.csv``.
    Returns a summary including the nearest-centroid probe accuracy on the
    planted activity snippets, which is also written to ``summary.json``.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    sig = class_signatures(rng, cfg.n_classes, cfg.feature_dim)
    summary = {"config": cfg.to_dict(), "splits": {}}
    for split, count in (("train", cfg.n_videos), ("test", cfg.n_test_videos)):
        if count == 0 and split == "test":
            continue
        videos, ann, labels = generate_split(rng, split, count, cfg, sig)
        write_corpus(out_dir / split / "features", videos)
        write_annotations(out_dir / split / "annotations.csv", ann)
        summary["splits"][split] = {
            "videos": count,
            "segments": sum(len(v) for v in ann.values()),
            "probe_accuracy": nearest_centroid_accuracy(videos, labels, cfg.signature_scale * sig),
        }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_split(split_dir) -> tuple[list[VideoFeatureFile], dict[str, list[Segment]]]:
    """Read ``features/`` and ``annotations.csv`` from one split directory."""
    split_dir = Path(split_dir)
    videos = read_corpus(split_dir / "features")
    ann = read_annotations(split_dir / "annotations.csv", {v.video_id: v.n_snippets for v in videos})
    return videos, ann
