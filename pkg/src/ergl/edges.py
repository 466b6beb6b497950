"""Multi-dimensional edge learning: node-context and node-node cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .exceptions import DimensionError
from .nn import Linear, Module, kaiming_uniform, param


class AttentionParams(Module):
    """Single-head projections W_q, W_k, W_v, each d x d, no bias."""

    def __init__(self, d, rng):
        self.W_q = param(kaiming_uniform(rng, (d, d), d))
        self.W_k = param(kaiming_uniform(rng, (d, d), d))
        self.W_v = param(kaiming_uniform(rng, (d, d), d))

    @property
    def d_k(self):
        return self.W_k.shape[1]


def cross_attention(query, kv, params, return_weights=False):
    """softmax(Q W_q (K W_k)^T / sqrt(d_k)) K W_v over the last two axes.

    Leading axes broadcast, so one call can attend every query set against
    every key/value set.
    """
    d = params.W_q.shape[0]
    if query.shape[-1] != d or kv.shape[-1] != d:
        raise DimensionError(
            f"cross_attention widths must equal {d}: query {query.shape}, key/value {kv.shape}"
        )
    q = ad.matmul(query, params.W_q)
    k = ad.matmul(kv, params.W_k)
    v = ad.matmul(kv, params.W_v)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) / math.sqrt(params.d_k)
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def context_of(tokens):
    """Tokenwise mean over the node axis: (B, n, T, d) -> (B, T, d)."""
    return ad.mean(tokens, axis=1)


def ncm(tokens, params, return_weights=False):
    """Scene-aware nodes S_i = attention(query=X_i, key/value=mean_j X_j)."""
    ctx = ad.expand_dims(context_of(tokens), 1)
    return cross_attention(tokens, ctx, params, return_weights)


def nnm(scene_nodes, params, return_weights=False):
    """Edge vectors for every ordered pair: e[b, i, j] = GAP(attention(S_i, S_j)).

    (B, n, T, d) -> (B, n, n, d).
    """
    q = ad.expand_dims(scene_nodes, 2)   # B, n, 1, T, d
    kv = ad.expand_dims(scene_nodes, 1)  # B, 1, n, T, d
    res = cross_attention(q, kv, params, return_weights)
    R, w = res if return_weights else (res, None)
    e = ad.mean(R, axis=-2)
    return (e, w) if return_weights else e


@dataclass
class EventRelationalGraph:
    """Batched dense graph: nodes (B, n, d), edges (B, n, n, d), event probs (B, n)."""

    node_feats: object
    edge_feats: object
    event_probs: object = None
    layer_index: int = 0
    vocab: object = None

    @property
    def n(self):
        return self.node_feats.shape[1]

    @property
    def d(self):
        return self.node_feats.shape[2]

    def __post_init__(self):
        B, n, d = self.node_feats.shape
        if self.edge_feats.shape != (B, n, n, d):
            raise DimensionError(
                f"edge features {self.edge_feats.shape} inconsistent with nodes {self.node_feats.shape}"
            )


class RelationalEdges(Module):
    """NCM + NNM with ablation switches.

    use_ncm=False feeds raw node tokens to NNM.  use_nnm=False replaces the
    pairwise attention with a learned projection of GAP(S_j), giving edges
    that carry no pairwise relation.
    """

    def __init__(self, d, rng, use_ncm=True, use_nnm=True):
        self.use_ncm = use_ncm
        self.use_nnm = use_nnm
        self.ncm_params = AttentionParams(d, rng)
        self.nnm_params = AttentionParams(d, rng)
        self.fallback = Linear(d, d, rng, bias=False)

    def scene_aware(self, tokens):
        return ncm(tokens, self.ncm_params) if self.use_ncm else tokens

    def edges(self, scene_nodes):
        if self.use_nnm:
            return nnm(scene_nodes, self.nnm_params)
        B, n, _, d = scene_nodes.shape
        gap = self.fallback(ad.mean(scene_nodes, axis=2))           # B, n, d
        return ad.broadcast_to(ad.expand_dims(gap, 1), (B, n, n, d))  # row i, column j -> f(S_j)

    def active_parameters(self):
        names = []
        if self.use_ncm:
            names += [f"ncm_params.{k}" for k in ("W_q", "W_k", "W_v")]
        if self.use_nnm:
            names += [f"nnm_params.{k}" for k in ("W_q", "W_k", "W_v")]
        else:
            names.append("fallback.weight")
        return names

    def forward(self, tokens, event_probs=None):
        S = self.scene_aware(tokens)
        e = self.edges(S)
        v = ad.mean(tokens, axis=2)
        return EventRelationalGraph(v, e, event_probs, 0)


def build_graph(tokens, edges_module, event_probs=None):
    return edges_module(tokens, event_probs)
