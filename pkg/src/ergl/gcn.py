"""Residual gated graph convolution over dense event-relational graphs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .edges import EventRelationalGraph
from .exceptions import ContractError
from .nn import BatchNorm, Linear, Module, kaiming_uniform, param

GATE_EPS = 1e-6


class GatedGCNLayer(Module):
    """One layer; row-vector convention (x @ A rather than A x).

    e'_ij = e_ij + ReLU(BN(e_ij A + h_i B + h_j C))
    eta_ij = sigmoid(e'_ij) / (sum_k sigmoid(e'_ik) + eps)
    h'_i  = h_i + ReLU(BN(h_i U + sum_j eta_ij * (h_j V)))
    """

    def __init__(self, d, rng):
        self.A = param(kaiming_uniform(rng, (d, d), d))
        self.B = param(kaiming_uniform(rng, (d, d), d))
        self.C = param(kaiming_uniform(rng, (d, d), d))
        self.Uw = param(kaiming_uniform(rng, (d, d), d))
        self.Vw = param(kaiming_uniform(rng, (d, d), d))
        self.edge_norm = BatchNorm(d, axis=-1)
        self.node_norm = BatchNorm(d, axis=-1)

    def forward(self, graph):
        h, e = graph.node_feats, graph.edge_feats
        Bh = ad.expand_dims(ad.matmul(h, self.B), 2)   # source i
        Ch = ad.expand_dims(ad.matmul(h, self.C), 1)   # neighbour j
        e_new = e + ad.relu(self.edge_norm(ad.matmul(e, self.A) + Bh + Ch))
        sig = ad.sigmoid(e_new)
        eta = sig / (ad.sum(sig, axis=2, keepdims=True) + GATE_EPS)
        Vh = ad.expand_dims(ad.matmul(h, self.Vw), 1)
        agg = ad.sum(eta * Vh, axis=2)
        h_new = h + ad.relu(self.node_norm(ad.matmul(h, self.Uw) + agg))
        return EventRelationalGraph(h_new, e_new, graph.event_probs, graph.layer_index + 1, graph.vocab)


@dataclass
class ScenePrediction:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted_scene: np.ndarray
    labels: tuple = ()

    @classmethod
    def from_logits(cls, logits, labels=()):
        logits = np.asarray(logits)
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return cls(logits, p, logits.argmax(axis=-1), tuple(labels))

    def label_names(self):
        if not self.labels:
            return [int(k) for k in np.atleast_1d(self.predicted_scene)]
        return [self.labels[k] for k in np.atleast_1d(self.predicted_scene)]


class GatedGCN(Module):
    def __init__(self, d, n_layers, rng):
        if n_layers < 1:
            raise ContractError(f"number of GCN layers must be >= 1, got {n_layers}")
        self.layers = [GatedGCNLayer(d, rng) for _ in range(n_layers)]

    @property
    def depth(self):
        return len(self.layers)

    def forward(self, graph, return_all=False):
        graphs = [graph]
        for layer in self.layers:
            graphs.append(layer(graphs[-1]))
        return graphs if return_all else graphs[-1]


def readout(graph, depth):
    """Concatenate final node features in vocabulary order: (B, n, d) -> (B, n*d)."""
    if graph.layer_index != depth:
        raise ContractError(f"readout needs the layer-{depth} graph, got layer {graph.layer_index}")
    B, n, d = graph.node_feats.shape
    return ad.reshape(graph.node_feats, (B, n * d))


class SceneClassifier(Module):
    def __init__(self, in_dim, n_scenes, rng):
        self.fc = Linear(in_dim, n_scenes, rng)

    def forward(self, x):
        return self.fc(x)
