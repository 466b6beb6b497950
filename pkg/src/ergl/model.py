"""The full network: backbone -> MEL edges -> Gated GCN -> scene logits."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import NODE_DIM, BackboneConfig, EventBackbone
from .edges import RelationalEdges
from .exceptions import ConfigurationError
from .gcn import GatedGCN, SceneClassifier, readout

N_SCENES = 10


@dataclass
class ModelConfig:
    n_events: int = 25
    n_layers: int = 2
    use_ncm: bool = True
    use_nnm: bool = True
    conv_channels: tuple = (64, 128, 256, 512)
    n_scenes: int = N_SCENES
    node_dim: int = NODE_DIM

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers (U) must be >= 1, got {self.n_layers}")
        if self.n_scenes < 2:
            raise ConfigurationError(f"n_scenes must be >= 2, got {self.n_scenes}")
        self.backbone_config()

    def backbone_config(self):
        return BackboneConfig(conv_channels=self.conv_channels, n_events=self.n_events,
                              node_dim=self.node_dim)

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


@dataclass
class ModelOutput:
    event_probs: object        # Tensor (B, n)
    logits: object             # Tensor (B, n_scenes)
    graphs: list = field(default_factory=list)   # G^0 .. G^U


class ERGLNet:
    """Parameter container + forward pass; not an sklearn estimator (see estimator.py)."""

    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.node_dim
        self.backbone = EventBackbone(config.backbone_config(), rng)
        self.mel = RelationalEdges(d, rng, config.use_ncm, config.use_nnm)
        self.gcn = GatedGCN(d, config.n_layers, rng)
        self.classifier = SceneClassifier(config.n_events * d, config.n_scenes, rng)

    def components(self):
        return {"backbone": self.backbone, "mel": self.mel, "gcn": self.gcn,
                "classifier": self.classifier}

    def named_parameters(self):
        for cname, comp in self.components().items():
            yield from comp.named_parameters(cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        out = {}
        for cname, comp in self.components().items():
            for k, v in comp.state_dict().items():
                kind, name = k.split(":", 1)
                out[f"{kind}:{cname}.{name}"] = v
        return out

    def load_state_dict(self, state):
        for cname, comp in self.components().items():
            prefix_p, prefix_b = f"param:{cname}.", f"buffer:{cname}."
            sub = {}
            for k, v in state.items():
                if k.startswith(prefix_p):
                    sub["param:" + k[len(prefix_p):]] = v
                elif k.startswith(prefix_b):
                    sub["buffer:" + k[len(prefix_b):]] = v
            comp.load_state_dict(sub)
        extra = [k for k in state if k.split(":", 1)[1].split(".", 1)[0] not in self.components()]
        if extra:
            raise KeyError(f"unexpected state entries: {extra}")
        return self

    def train(self, mode=True):
        for comp in self.components().values():
            comp.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        for comp in self.components().values():
            comp.astype(dtype)
        return self

    def forward(self, features, keep_graphs=False):
        if not isinstance(features, ad.Tensor):
            features = ad.Tensor(features)
        tokens, _, p = self.backbone(features)
        g0 = self.mel(tokens, p)
        graphs = self.gcn(g0, return_all=True)
        logits = self.classifier(readout(graphs[-1], self.gcn.depth))
        return ModelOutput(p, logits, graphs if keep_graphs else [])

    __call__ = forward
