"""Finite-difference verification of the full model's backward pass."""

from __future__ import annotations

import numpy as np

from .dataio import SyntheticConfig, class_signatures, _make_video
from .loss import LossWeights
from .numkit import check_gradient, zero_grads
from .temporal import build_anchor_bank
from .trainer import TrainConfig, chunk_loss, init_model, make_chunks


def tiny_problem(seed: int, n_classes: int = 3, feature_dim: int = 6, max_agents: int = 3, n_snippets: int = 16,
                 topology: str = "fully_connected", readout: str = "aggregated"):
    """A random one-chunk video plus a freshly initialised model with small widths."""
    rng = np.random.default_rng(seed)
    scfg = SyntheticConfig(n_videos=1, n_test_videos=0, n_snippets_min=n_snippets, n_snippets_max=n_snippets,
                           n_classes=n_classes, feature_dim=feature_dim, agents_min=0, agents_max=max_agents,
                           activity_len_min=2, activity_len_max=6, seed=seed)
    video, segs, _ = _make_video(rng, "gradcheck", scfg, class_signatures(rng, n_classes, feature_dim))
    cfg = TrainConfig(N=n_snippets, n_classes=n_classes, d_head=4, temporal_hidden=8, seed=seed,
                      topology=topology, readout=readout)
    model = init_model(cfg, feature_dim)
    chunk = make_chunks(video, cfg, segs, build_anchor_bank(n_snippets))[0]
    return model, chunk


def model_gradient_error(seed: int, h: float = 1e-5, **kw) -> float:
    """Max relative error between analytic and central-difference gradients of the total loss."""
    model, chunk = tiny_problem(seed, **kw)
    weights = LossWeights(lam=model.config.lam)
    params = model.params()
    zero_grads(params)
    chunk_loss(model, chunk, weights)
    return check_gradient(lambda: chunk_loss(model, chunk, weights, backward=False), params, h)
