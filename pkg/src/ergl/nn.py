"""Parameter containers and layers built on the autodiff core."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def kaiming_uniform(rng, shape, fan_in):
    # bound = 1/sqrt(fan_in): Kaiming-uniform with negative slope sqrt(5)
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def param(values):
    return Tensor(values, requires_grad=True)


class Module:
    """Holds parameters (Tensors), buffers (numpy arrays) and child modules."""

    training = True

    def _members(self):
        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in self._members():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{k}.")

    def named_buffers(self, prefix=""):
        for name, value in self._members():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{k}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, value in self._members():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast parameters and buffers in place (e.g. to float64 for grad checks)."""
        for m in self.modules():
            for name, value in list(m._members()):
                if isinstance(value, Tensor):
                    value.data = value.data.astype(dtype)
                    value.grad = None
                elif isinstance(value, np.ndarray):
                    setattr(m, name, value.astype(dtype))
        return self

    def state_dict(self):
        state = {f"param:{k}": p.data for k, p in self.named_parameters()}
        state.update({f"buffer:{k}": b for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for key, arr in state.items():
            if own[key].shape != arr.shape:
                raise ValueError(f"{key}: expected shape {own[key].shape}, got {arr.shape}")
        params = dict(self.named_parameters())
        for key, arr in state.items():
            kind, name = key.split(":", 1)
            if kind == "param":
                params[name].data = np.array(arr, copy=True)
            else:
                np.copyto(own[key], arr, casting="unsafe")
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True):
        self.weight = param(kaiming_uniform(rng, (in_dim, out_dim), in_dim))
        self.bias = param(kaiming_uniform(rng, (out_dim,), in_dim)) if bias else None

    def forward(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class BatchNorm(Module):
    """Batch normalisation over all axes except ``axis``."""

    def __init__(self, features, axis=-1, momentum=BN_MOMENTUM, eps=BN_EPS):
        self.gamma = param(np.ones(features))
        self.beta = param(np.zeros(features))
        self.running_mean = np.zeros(features, dtype=ad.get_default_dtype())
        self.running_var = np.ones(features, dtype=ad.get_default_dtype())
        self._axis = axis
        self._momentum = momentum
        self._eps = eps

    def forward(self, x):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, axis=self._axis, momentum=self._momentum, eps=self._eps,
        )


class Conv3x3(Module):
    def __init__(self, in_ch, out_ch, rng):
        self.kernel = param(kaiming_uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9))

    def forward(self, x):
        return ad.conv2d(x, self.kernel)
