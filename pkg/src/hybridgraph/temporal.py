"""Global temporal graph: 1-D conv stack over scene embeddings and the anchor bank."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UndefinedIoUError
from .numkit import Param, conv1d, conv1d_backward, glorot_uniform, sigmoid, sigmoid_grad_from_output

N_ANCHORS = 128
DEFAULT_SCALE_DIVISORS = (16, 8, 4, 2)


@dataclass
class ConvLayer:
    W: Param  # (c_out, c_in, k)
    b: Param  # (c_out,)


@dataclass
class TemporalParams:
    layers: list[ConvLayer]
    n_classes: int

    @property
    def d_in(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.layers[0].W.shape[2]

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out


def init_temporal(rng: np.random.Generator, d_in: int, n_classes: int, hidden: int = 64, kernel_size: int = 3) -> TemporalParams:
    if kernel_size % 2 == 0:
        raise ConfigError(f"temporal kernel size must be odd, got {kernel_size}")
    dims = [d_in, hidden, hidden, n_classes + 1]
    layers = []
    for c_in, c_out in zip(dims[:-1], dims[1:]):
        W = glorot_uniform(rng, (c_out, c_in, kernel_size), c_in * kernel_size, c_out * kernel_size)
        layers.append(ConvLayer(Param(W), Param(np.zeros(c_out))))
    return TemporalParams(layers, n_classes)


@dataclass
class TemporalOutputs:
    class_logits: np.ndarray  # (N, C), pre-sigmoid
    boundary_probs: np.ndarray  # (N,)

    @property
    def class_probs(self) -> np.ndarray:
        return sigmoid(self.class_logits)


@dataclass
class TemporalCache:
    inputs: list  # input to each conv layer
    hidden: list  # sigmoid outputs after layers 1 and 2
    boundary: np.ndarray


def temporal_forward(embeddings, params: TemporalParams):
    """conv -> sigmoid -> conv -> sigmoid -> conv. Returns ``(outputs, cache)``."""
    h = np.asarray(embeddings, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.d_in:
        raise DimensionError(f"temporal input shape {h.shape} does not match d_scene={params.d_in}")
    inputs, hidden = [], []
    n_layers = len(params.layers)
    for i, layer in enumerate(params.layers):
        inputs.append(h)
        h = conv1d(h, layer.W.value, layer.b.value)
        if i < n_layers - 1:
            h = sigmoid(h)
            hidden.append(h)
    C = params.n_classes
    boundary = sigmoid(h[:, C])
    return TemporalOutputs(h[:, :C].copy(), boundary), TemporalCache(inputs, hidden, boundary)


def temporal_backward(d_logits, d_boundary, cache: TemporalCache, params: TemporalParams) -> np.ndarray:
    """Accumulate conv gradients and return the gradient w.r.t. the embeddings."""
    d = np.concatenate([d_logits, (d_boundary * sigmoid_grad_from_output(cache.boundary))[:, None]], axis=1)
    for i in reversed(range(len(params.layers))):
        layer = params.layers[i]
        if i < len(params.layers) - 1:
            d = d * sigmoid_grad_from_output(cache.hidden[i])
        dx, dW, db = conv1d_backward(d, cache.inputs[i], layer.W.value)
        layer.W.grad += dW
        layer.b.grad += db
        d = dx
    return d


# -- anchors ----------------------------------------------------------------------


@dataclass
class AnchorBank:
    """Fixed class-agnostic temporal proposals as contiguous binary masks."""

    length: int
    windows: list[tuple[int, int]]  # (start, length)

    def __post_init__(self):
        masks = np.zeros((len(self.windows), self.length), dtype=bool)
        for i, (s, l) in enumerate(self.windows):
            masks[i, s:s + l] = True
        self.masks = masks

    def __len__(self):
        return len(self.windows)

    def clipped(self, n: int) -> "AnchorBank":
        """Bank restricted to the first ``n`` positions (for short tail chunks)."""
        if n >= self.length:
            return self
        seen, windows = set(), []
        for s, l in self.windows:
            if s >= n:
                continue
            w = (s, min(l, n - s))
            if w not in seen:
                seen.add(w)
                windows.append(w)
        return AnchorBank(n, windows)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def build_anchor_bank(N: int, n_anchors: int = N_ANCHORS, scale_divisors: Sequence[int] = DEFAULT_SCALE_DIVISORS) -> AnchorBank:
    """Multi-scale sliding windows, coarse to fine, deduplicated to ``n_anchors``.

    Scales are ``N / d`` for each divisor (rounded, at least 1) with stride
    ``scale / 2``. While fewer than ``n_anchors`` distinct windows exist the
    strides are halved again (down to 1). If the full stride-1 grid is still
    short, the remaining window lengths are added: first the lengths between
    the smallest and largest scale (longest first), then shorter, then longer.
    """
    if N < 4:
        raise ConfigError(f"anchor bank needs N >= 4, got {N}")
    max_placeable = N * (N + 1) // 2
    if max_placeable < n_anchors:
        raise ConfigError(f"N={N} admits at most {max_placeable} distinct windows, {n_anchors} requested")
    scales = sorted({max(1, _round_half_up(N / d)) for d in scale_divisors}, reverse=True)
    windows: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()

    def emit(length: int, stride: int) -> bool:
        for start in range(0, N - length + 1, stride):
            w = (start, length)
            if w not in seen:
                seen.add(w)
                windows.append(w)
                if len(windows) == n_anchors:
                    return True
        return False

    level = 1
    while True:
        strides = [max(1, s >> level) for s in scales]
        for s, stride in zip(scales, strides):
            if emit(s, stride):
                return AnchorBank(N, windows)
        if all(st == 1 for st in strides):
            break
        level += 1

    lo, hi = scales[-1], scales[0]
    rest = [l for l in range(hi - 1, lo, -1) if l not in scales]
    rest += list(range(lo - 1, 0, -1)) + list(range(hi + 1, N + 1))
    for length in rest:
        if emit(length, 1):
            return AnchorBank(N, windows)
    raise AssertionError("unreachable: max_placeable check guarantees enough windows")


def mask_iou(m1, m2) -> float:
    m1 = np.asarray(m1, dtype=bool)
    m2 = np.asarray(m2, dtype=bool)
    if m1.shape != m2.shape:
        raise DimensionError(f"mask lengths differ: {m1.shape} vs {m2.shape}")
    union = int(np.count_nonzero(m1 | m2))
    if union == 0:
        raise UndefinedIoUError("IoU of two empty masks is undefined")
    return np.count_nonzero(m1 & m2) / union


def match_anchor(gt_mask, bank: AnchorBank) -> tuple[int, float]:
    """Index and IoU of the bank mask with maximum IoU (lowest index on ties)."""
    gt = np.asarray(gt_mask, dtype=bool)
    if gt.shape != (bank.length,):
        raise DimensionError(f"gt mask length {gt.shape} does not match bank length {bank.length}")
    if not gt.any():
        raise UndefinedIoUError("cannot match an empty ground-truth mask")
    inter = (bank.masks & gt).sum(axis=1)
    union = (bank.masks | gt).sum(axis=1)
    iou = inter / union
    idx = int(np.argmax(iou))
    return idx, float(iou[idx])
