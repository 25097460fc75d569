"""Local scene graphs and the multi-head graph-attention stack.

Each snippet is a small graph: node 0 holds the whole-scene feature and nodes
1..n the agent-tube features. Four attention layers (head counts 4, 4, C, C)
update the node features; a learned matrix ``W2`` reduces the node outputs to
one scene embedding.

All heavy lifting is done on padded batches ``(B, n_max, d)`` with a boolean
adjacency mask so that a whole temporal chunk of snippets runs in a handful of
numpy calls. The single-graph functions are thin wrappers over the batched
path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, HybridGraphError
from .numkit import LEAKY_SLOPE, Param, glorot_uniform, leaky_relu, leaky_relu_grad, masked_softmax


class Topology(str, enum.Enum):
    FULLY_CONNECTED = "fully_connected"
    STAR = "star"
    STAR_SAME_LABEL = "star_same_label"
    SCENE_ONLY = "scene_only"


class Readout(str, enum.Enum):
    AGGREGATED = "aggregated"
    SCENE = "scene"


@dataclass
class AgentNode:
    label_id: int
    feature: np.ndarray


@dataclass
class SceneSnippet:
    snippet_index: int
    scene_feature: np.ndarray
    agents: list[AgentNode] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return int(np.shape(self.scene_feature)[0])

    def node_features(self, topology: Topology | str) -> np.ndarray:
        rows = [np.asarray(self.scene_feature, dtype=np.float64)]
        if Topology(topology) is not Topology.SCENE_ONLY:
            rows += [np.asarray(a.feature, dtype=np.float64) for a in self.agents]
        return np.stack(rows)


def build_edge_list(topology: Topology | str, agent_labels: Sequence[int]) -> list[tuple[int, int]]:
    """Edge tuples for one local scene graph.

    Node 0 is the scene node and node ``j`` (1-based) is agent ``j - 1``.
    The result always contains a self-loop per node and is symmetric.
    """
    topology = Topology(topology)
    if topology is Topology.SCENE_ONLY:
        return [(0, 0)]
    n = len(agent_labels) + 1
    edges = [(v, v) for v in range(n)]
    seen = set(edges)

    def add(u, v):
        for e in ((u, v), (v, u)):
            if e not in seen:
                seen.add(e)
                edges.append(e)

    if topology is Topology.FULLY_CONNECTED:
        for u in range(n):
            for v in range(u + 1, n):
                add(u, v)
    else:
        for j in range(1, n):
            add(0, j)
        if topology is Topology.STAR_SAME_LABEL:
            for j in range(1, n):
                for k in range(j + 1, n):
                    if agent_labels[j - 1] == agent_labels[k - 1]:
                        add(j, k)
    return edges


def edge_count_nodes(edges: Sequence[tuple[int, int]]) -> int:
    return 1 + max(max(u, v) for u, v in edges)


def edges_to_adjacency(edges: Sequence[tuple[int, int]], n_nodes: int | None = None) -> np.ndarray:
    """Boolean mask ``adj[i, j]`` that is True when node ``i`` attends to ``j``."""
    if n_nodes is None:
        n_nodes = edge_count_nodes(edges)
    adj = np.zeros((n_nodes, n_nodes), dtype=bool)
    for u, v in edges:
        if u >= n_nodes or v >= n_nodes:
            raise DimensionError(f"edge ({u}, {v}) out of range for {n_nodes} nodes")
        adj[v, u] = True
    return adj


@dataclass
class GatLayerParams:
    W: Param  # (heads, d_out, d_in)
    a: Param  # (heads, 2 * d_out): first half scores the attending node, second its neighbour
    slope: float = LEAKY_SLOPE

    @property
    def heads(self) -> int:
        return self.W.shape[0]

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    @property
    def d_in(self) -> int:
        return self.W.shape[2]

    def params(self) -> list[Param]:
        return [self.W, self.a]


@dataclass
class SgatStackParams:
    layers: list[GatLayerParams]
    W2: Param  # (d_scene, d_last)
    readout: Readout = Readout.AGGREGATED

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_scene(self) -> int:
        return self.W2.shape[0]

    def params(self) -> list[Param]:
        out = []
        for layer in self.layers:
            out += layer.params()
        return out + [self.W2]


def init_gat_layer(rng, d_in: int, d_out: int, heads: int, slope: float = LEAKY_SLOPE) -> GatLayerParams:
    if heads < 1:
        raise ConfigError(f"head count must be >= 1, got {heads}")
    # sqrt(heads) gain: the head mean divides the output variance by ``heads``
    W = np.sqrt(heads) * glorot_uniform(rng, (heads, d_out, d_in), d_in, d_out)
    a = glorot_uniform(rng, (heads, 2 * d_out), 2 * d_out, 1)
    return GatLayerParams(Param(W), Param(a), slope)


def init_sgat_stack(
    rng: np.random.Generator,
    d_in: int,
    n_classes: int,
    d_head: int = 8,
    d_scene: int | None = None,
    heads: Sequence[int] | None = None,
    readout: Readout | str = Readout.AGGREGATED,
) -> SgatStackParams:
    if heads is None:
        heads = (4, 4, n_classes, n_classes)
    if d_scene is None:
        d_scene = heads[-1] * d_head
    layers = []
    d = d_in
    for h in heads:
        layers.append(init_gat_layer(rng, d, d_head, h))
        d = d_head
    W2 = glorot_uniform(rng, (d_scene, d), d, d_scene)
    return SgatStackParams(layers, Param(W2), Readout(readout))


# -- batched attention layer ------------------------------------------------------


@dataclass
class _GatCache:
    x: np.ndarray
    z: np.ndarray
    raw: np.ndarray
    alpha: np.ndarray


def gat_forward_batch(x: np.ndarray, adj: np.ndarray, layer: GatLayerParams):
    """One attention layer over a padded batch.

    Args:
        x: node features ``(B, n, d_in)``.
        adj: attention mask ``(B, n, n)``; every row needs at least one True.
        layer: layer weights.

    Returns:
        ``(out, cache)`` with ``out`` of shape ``(B, n, d_out)`` (head mean).
    """
    if x.shape[-1] != layer.d_in:
        raise DimensionError(f"node features have dim {x.shape[-1]}, layer expects {layer.d_in}")
    d_out = layer.d_out
    z = np.einsum("bnd,hod->bhno", x, layer.W.value)
    a = layer.a.value
    s_self = np.einsum("bhno,ho->bhn", z, a[:, :d_out])
    s_nbr = np.einsum("bhno,ho->bhn", z, a[:, d_out:])
    raw = s_self[..., :, None] + s_nbr[..., None, :]
    alpha = masked_softmax(leaky_relu(raw, layer.slope), adj[:, None, :, :])
    out = (alpha @ z).mean(axis=1)
    return out, _GatCache(x, z, raw, alpha)


def gat_backward_batch(dout: np.ndarray, cache: _GatCache, layer: GatLayerParams) -> np.ndarray:
    """Accumulate layer gradients and return the gradient w.r.t. ``x``."""
    x, z, raw, alpha = cache.x, cache.z, cache.raw, cache.alpha
    heads, d_out = layer.heads, layer.d_out
    if z.shape[1] != heads or z.shape[-1] != d_out:
        raise HybridGraphError("attention cache does not match layer parameters")
    dh = np.broadcast_to(dout[:, None] / heads, z.shape)
    dalpha = dh @ np.swapaxes(z, -1, -2)
    dz = np.swapaxes(alpha, -1, -2) @ dh
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
    draw = de * leaky_relu_grad(raw, layer.slope)
    ds_self = draw.sum(axis=-1)
    ds_nbr = draw.sum(axis=-2)
    a = layer.a.value
    dz = dz + ds_self[..., None] * a[None, :, None, :d_out] + ds_nbr[..., None] * a[None, :, None, d_out:]
    layer.a.grad[:, :d_out] += np.einsum("bhn,bhno->ho", ds_self, z)
    layer.a.grad[:, d_out:] += np.einsum("bhn,bhno->ho", ds_nbr, z)
    layer.W.grad += np.einsum("bhno,bnd->hod", dz, x)
    return np.einsum("bhno,hod->bnd", dz, layer.W.value)


# -- batched stack ----------------------------------------------------------------


@dataclass
class SnippetBatch:
    """Padded node features, attention masks and valid-node masks."""

    x: np.ndarray  # (B, n_max, d)
    adj: np.ndarray  # (B, n_max, n_max) bool
    node_mask: np.ndarray  # (B, n_max) bool

    def __len__(self):
        return self.x.shape[0]


def pack_graphs(features: Sequence[np.ndarray], edge_lists: Sequence[Sequence[tuple[int, int]]]) -> SnippetBatch:
    n_max = max(f.shape[0] for f in features)
    d = features[0].shape[1]
    B = len(features)
    x = np.zeros((B, n_max, d))
    adj = np.zeros((B, n_max, n_max), dtype=bool)
    node_mask = np.zeros((B, n_max), dtype=bool)
    for b, (f, edges) in enumerate(zip(features, edge_lists)):
        n = f.shape[0]
        if f.shape[1] != d:
            raise DimensionError(f"graph {b} has feature dim {f.shape[1]}, expected {d}")
        if edge_count_nodes(edges) != n:
            raise DimensionError(f"graph {b}: edge list covers {edge_count_nodes(edges)} nodes, features have {n}")
        x[b, :n] = f
        adj[b, :n, :n] = edges_to_adjacency(edges, n)
        node_mask[b, :n] = True
    # padded nodes attend only to themselves and are excluded from readout
    pad = ~node_mask
    idx = np.arange(n_max)
    adj[:, idx, idx] |= pad
    return SnippetBatch(x, adj, node_mask)


def pack_snippets(snippets: Sequence[SceneSnippet], topology: Topology | str) -> SnippetBatch:
    feats = [s.node_features(topology) for s in snippets]
    edges = [build_edge_list(topology, [a.label_id for a in s.agents]) for s in snippets]
    return pack_graphs(feats, edges)


@dataclass
class SgatCache:
    layer_caches: list
    pre_acts: list
    pooled: np.ndarray
    node_mask: np.ndarray
    readout: Readout


def sgat_forward_batch(batch: SnippetBatch, params: SgatStackParams):
    """Scene embeddings ``(B, d_scene)`` for a padded batch, plus a backward cache."""
    h = batch.x
    caches, pres = [], []
    for layer in params.layers:
        pre, c = gat_forward_batch(h, batch.adj, layer)
        caches.append(c)
        pres.append(pre)
        h = leaky_relu(pre, layer.slope)
    if params.readout is Readout.AGGREGATED:
        w = batch.node_mask / batch.node_mask.sum(axis=1, keepdims=True)
        pooled = np.einsum("bn,bnd->bd", w, h)
    else:
        pooled = h[:, 0, :]
    emb = pooled @ params.W2.value.T
    return emb, SgatCache(caches, pres, pooled, batch.node_mask, params.readout)


def sgat_backward_batch(d_emb: np.ndarray, cache: SgatCache, params: SgatStackParams) -> np.ndarray:
    """Accumulate stack gradients; returns the gradient w.r.t. the node features."""
    if len(cache.layer_caches) != len(params.layers) or cache.readout is not params.readout:
        raise HybridGraphError("scene-graph cache does not match stack parameters")
    params.W2.grad += d_emb.T @ cache.pooled
    dpooled = d_emb @ params.W2.value
    mask = cache.node_mask
    B, n = mask.shape
    if cache.readout is Readout.AGGREGATED:
        w = mask / mask.sum(axis=1, keepdims=True)
        dh = w[:, :, None] * dpooled[:, None, :]
    else:
        dh = np.zeros((B, n, dpooled.shape[1]))
        dh[:, 0, :] = dpooled
    for layer, c, pre in zip(reversed(params.layers), reversed(cache.layer_caches), reversed(cache.pre_acts)):
        dh = gat_backward_batch(dh * leaky_relu_grad(pre, layer.slope), c, layer)
    return dh


# -- single-graph API -------------------------------------------------------------


def gat_layer_forward(features, edges: Sequence[tuple[int, int]], params: GatLayerParams) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    adj = edges_to_adjacency(edges, x.shape[0])
    out, _ = gat_forward_batch(x[None], adj[None], params)
    return out[0]


def attention_coefficients(features, edges: Sequence[tuple[int, int]], params: GatLayerParams) -> np.ndarray:
    """Per-head attention weights ``(H, n, n)``; row ``i`` is node ``i``'s neighbourhood."""
    x = np.asarray(features, dtype=np.float64)
    adj = edges_to_adjacency(edges, x.shape[0])
    _, cache = gat_forward_batch(x[None], adj[None], params)
    return cache.alpha[0]


def sgat_forward(snippet: SceneSnippet, edges: Sequence[tuple[int, int]], params: SgatStackParams):
    """Scene embedding for one snippet. Returns ``(embedding, cache)``."""
    n = edge_count_nodes(edges)
    if n == 1:
        feats = snippet.node_features(Topology.SCENE_ONLY)
    elif n == len(snippet.agents) + 1:
        feats = snippet.node_features(Topology.FULLY_CONNECTED)
    else:
        raise DimensionError(f"edge list covers {n} nodes but snippet has {len(snippet.agents)} agents")
    batch = pack_graphs([feats], [edges])
    emb, cache = sgat_forward_batch(batch, params)
    return emb[0], cache


def sgat_backward(d_emb, cache: SgatCache, params: SgatStackParams) -> np.ndarray:
    """Backward for :func:`sgat_forward`; returns the node-feature gradient ``(n, d)``."""
    return sgat_backward_batch(np.asarray(d_emb, dtype=np.float64)[None], cache, params)[0]
