"""Graph export for inspection: JSON and Graphviz DOT.

Display rules: a node is active when its event probability is at least 0.1;
edges whose endpoints are both inactive are dropped; each remaining edge is
summarised by the mean of its edge vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVE_THRESHOLD = 0.1


def is_active(prob, threshold=ACTIVE_THRESHOLD):
    return bool(prob >= threshold)


@dataclass
class GraphExport:
    nodes: list
    edges: list
    layout: dict = field(default_factory=dict)

    def active_set(self):
        return {nd["name"] for nd in self.nodes if nd["active"]}

    def edge_list(self):
        return [(e["src"], e["dst"]) for e in self.edges]

    def to_json(self):
        return json.dumps({"nodes": self.nodes, "edges": self.edges, "layout": self.layout},
                          indent=2, sort_keys=True)


def build_export(names, probs, edge_feats, threshold=ACTIVE_THRESHOLD, scene=None):
    """``probs`` (n,), ``edge_feats`` (n, n, d) for a single clip."""
    probs = np.asarray(probs, dtype=np.float64)
    edge_feats = np.asarray(edge_feats, dtype=np.float64)
    n = len(names)
    if probs.shape != (n,) or edge_feats.shape[:2] != (n, n):
        raise ValueError(f"shape mismatch: {n} names, probs {probs.shape}, edges {edge_feats.shape}")
    active = [is_active(p, threshold) for p in probs]
    nodes = [{"name": names[i], "index": i, "probability": float(probs[i]), "active": active[i]}
             for i in range(n)]
    weights = edge_feats.mean(axis=-1)
    edges = []
    for i in range(n):
        for j in range(n):
            if not active[i] and not active[j]:
                continue
            edges.append({"src": names[i], "dst": names[j], "mean_weight": float(weights[i, j])})
    layout = {"threshold": threshold, "rankdir": "LR"}
    if scene is not None:
        layout["scene"] = scene
    return GraphExport(nodes, edges, layout)


def _quote(s):
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(export, max_penwidth=6.0):
    """Nodes sized by probability; edge pen width proportional to |mean weight|."""
    lines = ["digraph ERG {", f'  rankdir={export.layout.get("rankdir", "LR")};']
    if "scene" in export.layout:
        lines.append(f"  label={_quote(export.layout['scene'])};")
    for nd in export.nodes:
        width = 0.3 + 1.2 * nd["probability"]
        style = "solid" if nd["active"] else "dashed"
        lines.append(
            f"  {_quote(nd['name'])} [width={width:.3f}, height={width:.3f}, style={style}, "
            f"probability={nd['probability']:.6g}, active={str(nd['active']).lower()}];"
        )
    top = max((abs(e["mean_weight"]) for e in export.edges), default=0.0)
    for e in export.edges:
        pen = max_penwidth * abs(e["mean_weight"]) / top if top > 0 else 1.0
        lines.append(
            f"  {_quote(e['src'])} -> {_quote(e['dst'])} "
            f"[penwidth={pen:.4f}, weight_mean={e['mean_weight']:.6g}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"
