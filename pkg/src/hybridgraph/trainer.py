"""Training and inference for the scene-graph + temporal-graph detector."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import VideoFeatureFile
from .decode import chunk_video, decode_segments, nms_temporal, offset_segment
from .errors import ConfigError, NumericError, SchemaError
from .evalkit import EvalReport, mean_ap
from .loss import LossWeights, act_loss, br_loss, total_loss
from .numkit import Param, zero_grads
from .scenegraph import Readout, SgatStackParams, SnippetBatch, Topology, init_sgat_stack, pack_snippets, \
    sgat_backward_batch, sgat_forward_batch
from .segments import Segment
from .temporal import AnchorBank, TemporalOutputs, TemporalParams, build_anchor_bank, init_temporal, match_anchor, \
    temporal_backward, temporal_forward

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "hybridgraph-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    N: int = 32
    n_classes: int = 4
    topology: str = Topology.FULLY_CONNECTED.value
    readout: str = Readout.AGGREGATED.value
    d_head: int = 8
    d_scene: int | None = None
    heads: list[int] | None = None
    temporal_hidden: int = 64
    kernel_size: int = 3
    background_channel: bool = False
    lam: float = 128.0
    lr: float = 0.0015
    momentum: float = 0.9
    lr_decay_epochs: list[int] = field(default_factory=lambda: [18, 25])
    lr_decay_factor: float = 0.1
    epochs: int = 30
    seed: int = 7
    theta: float = 0.5
    snap: bool = False
    smooth_labels: bool = True
    nms_iou: float = 0.5
    n_anchors: int = 128
    anchor_divisors: list[int] = field(default_factory=lambda: [16, 8, 4, 2])

    def __post_init__(self):
        Topology(self.topology)
        Readout(self.readout)
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.N < 4:
            raise ConfigError(f"N must be >= 4, got {self.N}")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if not 0.0 < self.theta < 1.0:
            raise ConfigError(f"theta must lie in (0, 1), got {self.theta}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_channels(self) -> int:
        return self.n_classes + (1 if self.background_channel else 0)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops


@dataclass
class Model:
    config: TrainConfig
    feature_dim: int
    sgat: SgatStackParams
    temporal: TemporalParams

    def params(self) -> list[Param]:
        return self.sgat.params() + self.temporal.params()

    def named_params(self) -> list[tuple[str, Param]]:
        out = []
        for i, layer in enumerate(self.sgat.layers):
            out += [(f"sgat.layer{i}.W", layer.W), (f"sgat.layer{i}.a", layer.a)]
        out.append(("sgat.W2", self.sgat.W2))
        for i, layer in enumerate(self.temporal.layers):
            out += [(f"temporal.conv{i}.W", layer.W), (f"temporal.conv{i}.b", layer.b)]
        return out


def init_model(cfg: TrainConfig, feature_dim: int) -> Model:
    rng = np.random.default_rng(cfg.seed)
    heads = cfg.heads if cfg.heads is not None else [4, 4, cfg.n_channels, cfg.n_channels]
    sgat = init_sgat_stack(rng, feature_dim, cfg.n_channels, cfg.d_head, cfg.d_scene, heads, cfg.readout)
    temporal = init_temporal(rng, sgat.d_scene, cfg.n_channels, cfg.temporal_hidden, cfg.kernel_size)
    return Model(cfg, feature_dim, sgat, temporal)


# -- per-chunk computation --------------------------------------------------------


@dataclass
class Chunk:
    video_id: str
    offset: int
    batch: SnippetBatch
    y_s: np.ndarray | None = None
    y_br: np.ndarray | None = None


def build_targets(n: int, offset: int, segments: Sequence[Segment], n_classes: int,
                  bank: AnchorBank, background_channel: bool = False):
    """Class targets ``(n, C[+1])`` and anchor-snapped boundary targets ``(n,)`` for one chunk."""
    y_s = np.zeros((n, n_classes + (1 if background_channel else 0)))
    y_br = np.zeros(n)
    shift = 1 if background_channel else 0
    for seg in segments:
        s = max(seg.start - offset, 0)
        e = min(seg.end - offset, n - 1)
        if s > e:
            continue
        if seg.class_id >= n_classes:
            raise SchemaError(f"{seg.video_id}: class {seg.class_id} outside the {n_classes} configured classes")
        y_s[s:e + 1, seg.class_id + shift] = 1.0
        gt = np.zeros(n, dtype=bool)
        gt[s:e + 1] = True
        idx, _ = match_anchor(gt, bank)
        y_br[bank.masks[idx]] = 1.0
    if background_channel:
        y_s[:, 0] = (y_s[:, 1:].sum(axis=1) == 0).astype(float)
    return y_s, y_br


def make_chunks(video: VideoFeatureFile, cfg: TrainConfig, segments: Sequence[Segment] | None = None,
                bank: AnchorBank | None = None) -> list[Chunk]:
    chunks = []
    for off, n in chunk_video(video.n_snippets, cfg.N):
        batch = pack_snippets(video.snippets[off:off + n], cfg.topology)
        ch = Chunk(video.video_id, off, batch)
        if segments is not None:
            ch.y_s, ch.y_br = build_targets(n, off, segments, cfg.n_classes, bank.clipped(n), cfg.background_channel)
        chunks.append(ch)
    return chunks


def forward_chunk(model: Model, batch: SnippetBatch):
    emb, sc = sgat_forward_batch(batch, model.sgat)
    out, tc = temporal_forward(emb, model.temporal)
    return out, (sc, tc)


def chunk_loss(model: Model, chunk: Chunk, weights: LossWeights, backward: bool = True) -> float:
    """Total loss of one chunk; with ``backward`` the gradients are accumulated."""
    out, (sc, tc) = forward_chunk(model, chunk.batch)
    la, g_logits = act_loss(chunk.y_s, out.class_logits, weights.pos_class_weight, weights.class_weight)
    lb, g_br = br_loss(chunk.y_br, out.boundary_probs, weights.snippet_weight)
    loss = total_loss(la, lb, weights)
    if backward:
        d_emb = temporal_backward(weights.lam * g_logits, g_br, tc, model.temporal)
        sgat_backward_batch(d_emb, sc, model.sgat)
    return loss


class SGD:
    """Momentum SGD (``v = mu v + g``, ``p -= lr v``)."""

    def __init__(self, params: Sequence[Param], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.value -= lr * v


@dataclass
class Checkpoint:
    model: Model
    epoch: int
    epoch_losses: list[float]
    step_losses: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        params = {name: {"shape": list(p.shape), "values": p.value.reshape(-1).tolist()}
                  for name, p in self.model.named_params()}
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.model.config.to_dict(),
            "feature_dim": self.model.feature_dim,
            "epoch": self.epoch,
            "epoch_losses": self.epoch_losses,
            "step_losses": self.step_losses,
            "params": params,
        }
        return json.dumps(doc, sort_keys=True, allow_nan=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"checkpoint is not valid JSON (line {exc.lineno}): {exc.msg}") from None
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise SchemaError("unrecognised checkpoint format or version")
        cfg = TrainConfig.from_dict(doc["config"])
        model = init_model(cfg, doc["feature_dim"])
        stored = doc["params"]
        for name, p in model.named_params():
            if name not in stored:
                raise SchemaError(f"checkpoint lacks parameter {name}")
            rec = stored[name]
            if tuple(rec["shape"]) != p.shape:
                raise SchemaError(f"parameter {name}: stored shape {rec['shape']} != expected {list(p.shape)}")
            p.value[...] = np.array(rec["values"], dtype=np.float64).reshape(p.shape)
        return cls(model, doc["epoch"], doc["epoch_losses"], doc.get("step_losses", []))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _check_dims(model_dim: int, videos: Sequence[VideoFeatureFile]) -> None:
    for v in videos:
        if v.feature_dim != model_dim:
            raise SchemaError(f"video {v.video_id} has feature_dim {v.feature_dim}, model expects {model_dim}")


def train(cfg: TrainConfig, videos: Sequence[VideoFeatureFile], annotations: Mapping[str, Sequence[Segment]],
          weights: LossWeights | None = None) -> Checkpoint:
    """Fit the model; one chunk per SGD step, video order reshuffled every epoch."""
    if not videos:
        raise SchemaError("training needs at least one video")
    D = videos[0].feature_dim
    _check_dims(D, videos)
    model = init_model(cfg, D)
    weights = weights or LossWeights(lam=cfg.lam)
    bank = build_anchor_bank(cfg.N, cfg.n_anchors, cfg.anchor_divisors)
    chunks = [make_chunks(v, cfg, annotations.get(v.video_id, []), bank) for v in videos]
    params = model.params()
    opt = SGD(params, cfg.momentum)
    order_rng = np.random.default_rng([cfg.seed, 1])
    epoch_losses, step_losses = [], []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        losses = []
        for vi in order_rng.permutation(len(chunks)):
            for ch in chunks[vi]:
                zero_grads(params)
                loss = chunk_loss(model, ch, weights)
                if not np.isfinite(loss):
                    raise NumericError(f"loss diverged at epoch {epoch}, step {len(step_losses)} (video {ch.video_id})")
                opt.step(lr)
                losses.append(loss)
                step_losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d lr %.4g mean loss %.6f", epoch, lr, epoch_losses[-1])
    return Checkpoint(model, cfg.epochs, epoch_losses, step_losses)


# -- inference --------------------------------------------------------------------


def _strip_background(out: TemporalOutputs, cfg: TrainConfig) -> TemporalOutputs:
    if not cfg.background_channel:
        return out
    return TemporalOutputs(out.class_logits[:, 1:], out.boundary_probs)


def detect_video(model: Model, video: VideoFeatureFile, theta: float | None = None) -> list[Segment]:
    cfg = model.config
    theta = cfg.theta if theta is None else theta
    bank = build_anchor_bank(cfg.N, cfg.n_anchors, cfg.anchor_divisors) if cfg.snap else None
    segs = []
    for ch in make_chunks(video, cfg):
        out, _ = forward_chunk(model, ch.batch)
        out = _strip_background(out, cfg)
        b = bank.clipped(len(out.boundary_probs)) if bank is not None else None
        for s in decode_segments(out, b, theta, cfg.snap, cfg.smooth_labels):
            segs.append(offset_segment(s, ch.offset, video.video_id))
    kept = nms_temporal(segs, cfg.nms_iou)
    return sorted(kept, key=lambda s: (s.start, s.end, s.class_id, -s.score))


def _detect_worker(args):
    model, video, theta = args
    return video.video_id, detect_video(model, video, theta)


def detect(checkpoint: Checkpoint, videos: Sequence[VideoFeatureFile], theta: float | None = None,
           jobs: int = 1) -> dict[str, list[Segment]]:
    model = checkpoint.model
    _check_dims(model.feature_dim, videos)
    if jobs > 1 and len(videos) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_detect_worker, [(model, v, theta) for v in videos]))
    else:
        results = [(v.video_id, detect_video(model, v, theta)) for v in videos]
    return dict(results)


def snippet_labels(model: Model, video: VideoFeatureFile) -> np.ndarray:
    """Per-snippet class argmax (``-1`` where the boundary head is below theta)."""
    cfg = model.config
    labels = []
    for ch in make_chunks(video, cfg):
        out, _ = forward_chunk(model, ch.batch)
        out = _strip_background(out, cfg)
        lab = np.argmax(out.class_probs, axis=1)
        labels.append(np.where(out.boundary_probs >= cfg.theta, lab, -1))
    return np.concatenate(labels) if labels else np.zeros(0, dtype=int)


def topology_ablation(cfg: TrainConfig, train_videos, train_ann, test_videos, test_ann,
                      thresholds: Sequence[float], topologies: Sequence[str] | None = None) -> dict[str, EvalReport]:
    """Train and evaluate once per topology with everything else fixed."""
    topologies = topologies or [t.value for t in Topology]
    out = {}
    for topo in topologies:
        c = TrainConfig.from_dict({**cfg.to_dict(), "topology": topo})
        ck = train(c, train_videos, train_ann)
        out[topo] = mean_ap(detect(ck, test_videos), test_ann, thresholds)
    return out


def ablation_table(reports: Mapping[str, EvalReport]) -> str:
    first = next(iter(reports.values()))
    heads = ["topology"] + [f"@{t:g}" for t in first.thresholds] + ["avg"]
    rows = [[name] + [f"{100 * m:.1f}" for m in r.map_per_threshold] + [f"{100 * r.average_map:.1f}"]
            for name, r in reports.items()]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(heads)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(heads, widths)))]
    for r in rows:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"
