"""CNN encoder producing per-event token matrices, node embeddings and event probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError, DimensionError
from .nn import BatchNorm, Conv3x3, Linear, Module, kaiming_uniform, param

NODE_DIM = 64
JOINT_DIM = 2048
N_MELS = 64


@dataclass
class BackboneConfig:
    conv_channels: tuple = (64, 128, 256, 512)
    n_events: int = 25
    node_dim: int = NODE_DIM
    joint_dim: int = JOINT_DIM
    pool: int = 2

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.node_dim != NODE_DIM:
            raise ConfigurationError(f"node_dim is fixed at {NODE_DIM}, got {self.node_dim}")
        if self.joint_dim != JOINT_DIM:
            raise ConfigurationError(f"joint_dim is fixed at {JOINT_DIM}, got {self.joint_dim}")
        if self.n_events < 1:
            raise ConfigurationError(f"n_events must be >= 1, got {self.n_events}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigurationError(f"conv_channels must be a nonempty list of positive widths")

    def output_frames(self, T):
        """Token count T' after the pooling schedule (floor halving per block)."""
        for _ in self.conv_channels:
            T //= self.pool
        return T

    def check_input(self, T, F=N_MELS):
        t, f = T, F
        for _ in self.conv_channels:
            t, f = t // self.pool, f // self.pool
        if t < 1 or f < 1:
            raise ConfigurationError(
                f"input of {T}x{F} frames does not survive {len(self.conv_channels)} "
                f"{self.pool}x{self.pool} poolings; need at least {self.pool ** len(self.conv_channels)} frames"
            )


class ConvBlock(Module):
    def __init__(self, in_ch, out_ch, rng):
        self.conv1 = Conv3x3(in_ch, out_ch, rng)
        self.bn1 = BatchNorm(out_ch, axis=1)
        self.conv2 = Conv3x3(out_ch, out_ch, rng)
        self.bn2 = BatchNorm(out_ch, axis=1)

    def forward(self, x):
        x = ad.relu(self.bn1(self.conv1(x)))
        x = ad.relu(self.bn2(self.conv2(x)))
        return ad.avg_pool2d(x, 2)


class EventHeads(Module):
    """n independent FC maps joint_dim -> node_dim, applied per time step.

    Stored as one (n, joint_dim, node_dim) tensor; slice i only ever touches
    head i's output.
    """

    def __init__(self, n, in_dim, out_dim, rng):
        self.weight = param(kaiming_uniform(rng, (n, in_dim, out_dim), in_dim))
        self.bias = param(kaiming_uniform(rng, (n, out_dim), in_dim))

    def forward(self, joint):
        n, D, d = self.weight.shape
        B, T, _ = joint.shape
        w = ad.transpose(self.weight, (1, 0, 2)).reshape(D, n * d)
        out = ad.matmul(joint, w).reshape(B, T, n, d)
        out = ad.transpose(out, (0, 2, 1, 3))
        return out + self.bias.reshape(1, n, 1, d)


class EventClassifier(Module):
    """Per-event logistic layer on the pooled embedding."""

    def __init__(self, n, d, rng):
        self.weight = param(kaiming_uniform(rng, (n, d), d))
        self.bias = param(np.zeros(n))

    def forward(self, v):
        logits = ad.sum(v * self.weight, axis=-1) + self.bias
        return ad.sigmoid(logits)


class EventBackbone(Module):
    def __init__(self, config, rng):
        self.config = config
        widths = (1,) + config.conv_channels
        self.blocks = [ConvBlock(widths[k], widths[k + 1], rng) for k in range(len(config.conv_channels))]
        self.fc_joint = Linear(widths[-1], config.joint_dim, rng)
        self.heads = EventHeads(config.n_events, config.joint_dim, config.node_dim, rng)
        self.classifier = EventClassifier(config.n_events, config.node_dim, rng)

    def conv_stack(self, features):
        """(B, T, 64) log-mel -> (B, T', C) token sequence."""
        if features.ndim != 3 or features.shape[-1] != N_MELS:
            raise DimensionError(f"expected (batch, frames, {N_MELS}) features, got {features.shape}")
        self.config.check_input(features.shape[1])
        B, T, F = features.shape
        x = features.reshape(B, 1, T, F)
        for block in self.blocks:
            x = block(x)
        x = ad.mean(x, axis=3)  # frequency fully pooled
        return ad.transpose(x, (0, 2, 1))

    def joint_representation(self, tokens):
        return ad.relu(self.fc_joint(tokens))

    def event_heads(self, joint):
        """(B, T', 2048) -> (B, n, T', 64) per-event token matrices."""
        return self.heads(joint)

    def pool_and_predict(self, node_tokens):
        """Temporal mean -> embeddings (B, n, 64) and event probabilities (B, n)."""
        v = ad.mean(node_tokens, axis=2)
        return v, self.classifier(v)

    def forward(self, features):
        tokens = self.event_heads(self.joint_representation(self.conv_stack(features)))
        v, p = self.pool_and_predict(tokens)
        return tokens, v, p
