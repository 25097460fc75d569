"""Dense float64 kernels with hand-written backward passes.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Weight tensors
that bundle several heads or kernel taps keep their natural rank (for example
conv kernels are ``(c_out, c_in, k)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, NumericError

SIGMOID_EPS = 1e-7
LEAKY_SLOPE = 0.2


@dataclass
class Param:
    """A trainable tensor and its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    if m.size == 0:
        raise DimensionError("softmax_rows needs a nonempty matrix")
    z = np.exp(m - m.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; masked entries get 0.

    Every row must have at least one unmasked entry.
    """
    neg = np.where(mask, logits, -np.inf)
    z = np.exp(neg - neg.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(np.asarray(x) > 0, 1.0, slope)


def sigmoid(x) -> np.ndarray:
    """Logistic function clamped to ``(eps, 1 - eps)``."""
    return np.clip(expit(np.asarray(x, dtype=np.float64)), SIGMOID_EPS, 1.0 - SIGMOID_EPS)


def sigmoid_grad_from_output(y: np.ndarray) -> np.ndarray:
    # zero where the clamp is active, matching the forward map
    g = y * (1.0 - y)
    return np.where((y <= SIGMOID_EPS) | (y >= 1.0 - SIGMOID_EPS), 0.0, g)


def activation(m, kind: str, slope: float = LEAKY_SLOPE) -> np.ndarray:
    if kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
        return leaky_relu(m, slope)
    if kind == "sigmoid":
        return sigmoid(m)
    raise ConfigError(f"unknown activation {kind!r}")


def _pad_and_unfold(x: np.ndarray, k: int) -> np.ndarray:
    n, c_in = x.shape
    pad = (k - 1) // 2
    xp = np.zeros((n + 2 * pad, c_in))
    xp[pad:pad + n] = x
    # cols[t, c, j] = x[t + j - pad, c]
    idx = np.arange(n)[:, None] + np.arange(k)[None, :]
    return xp[idx].transpose(0, 2, 1)


def conv1d(x, kernels, bias) -> np.ndarray:
    """'Same'-length 1-D convolution (cross-correlation) with zero padding.

    Args:
        x: input of shape ``(n, c_in)``.
        kernels: weights of shape ``(c_out, c_in, k)`` with odd ``k``.
        bias: vector of length ``c_out``.

    Returns:
        Output of shape ``(n, c_out)``.
    """
    x = as_matrix(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    c_out, c_in, k = kernels.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {k}")
    if x.shape[1] != c_in:
        raise DimensionError(f"conv1d input has {x.shape[1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv1d bias shape {bias.shape} does not match c_out={c_out}")
    cols = _pad_and_unfold(x, k)
    return cols.reshape(x.shape[0], -1) @ kernels.reshape(c_out, -1).T + bias


def conv1d_backward(dout: np.ndarray, x: np.ndarray, kernels: np.ndarray):
    """Gradients of :func:`conv1d` with respect to input, kernels and bias."""
    n, c_in = x.shape
    c_out, _, k = kernels.shape
    pad = (k - 1) // 2
    cols = _pad_and_unfold(x, k).reshape(n, -1)
    dkernels = (dout.T @ cols).reshape(c_out, c_in, k)
    dbias = dout.sum(axis=0)
    dcols = (dout @ kernels.reshape(c_out, -1)).reshape(n, c_in, k)
    dxp = np.zeros((n + 2 * pad, c_in))
    for j in range(k):
        dxp[j:j + n] += dcols[:, :, j]
    return dxp[pad:pad + n], dkernels, dbias


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


def check_gradient(f: Callable[[], float], params: Sequence[Param], h: float = 1e-5) -> float:
    """Compare accumulated analytic gradients against central differences.

    ``f`` must evaluate the scalar objective from the current parameter
    values, and each ``Param.grad`` must already hold the analytic gradient
    at that point. Parameter values are restored on exit.

    Returns:
        max over all coordinates of ``|analytic - numeric| / max(1, |numeric|)``.
    """
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"objective is not finite near coordinate {i} of a {p.shape} parameter")
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
