"""Losses, AdamW, the training loop and evaluation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError, ContractError, DimensionError, NumericalError
from .model import ERGLNet, ModelConfig

log = logging.getLogger(__name__)

DESK_CHANNELS = (4, 8, 16, 32)
FULL_SCALE_CHANNELS = (64, 128, 256, 512)


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 50
    n_events: int = 25
    n_layers: int = 2
    use_ncm: bool = True
    use_nnm: bool = True
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    precision: str = "float32"
    conv_channels: tuple = DESK_CHANNELS
    n_scenes: int = 10

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be positive, got {self.epochs}")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be nonnegative")

    @classmethod
    def full_scale(cls, **overrides):
        """Full-scale hyperparameters: 400 epochs, batch 64, lr 1e-4, wide backbone."""
        base = dict(lr=1e-4, batch_size=64, epochs=400, n_events=25, n_layers=2,
                    conv_channels=FULL_SCALE_CHANNELS)
        base.update(overrides)
        return cls(**base)

    def model_config(self):
        return ModelConfig(n_events=self.n_events, n_layers=self.n_layers, use_ncm=self.use_ncm,
                           use_nnm=self.use_nnm, conv_channels=self.conv_channels,
                           n_scenes=self.n_scenes)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EpochReport:
    epoch: int
    L_event: float
    L_scene: float
    L_total: float
    scene_accuracy: float
    val_accuracy: float | None = None
    wall_time: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


# -- losses ----------------------------------------------------------------

def event_loss(p, y):
    """Mean squared error over events and batch."""
    y = ad.as_tensor(y) if isinstance(y, ad.Tensor) else ad.Tensor(np.asarray(y, dtype=p.dtype), dtype=p.dtype)
    if p.shape != y.shape:
        raise ContractError(f"event_loss: predictions {p.shape} and targets {y.shape} differ")
    diff = p - y
    return ad.mean(diff * diff)


def scene_loss(logits, labels):
    """Cross entropy, averaged over the batch. ``logits`` (B, K) or (K,)."""
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels))
    K = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ContractError(f"scene_loss: {labels.shape[0]} labels for {logits.shape[0]} rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= K:
        raise ContractError(f"scene labels must be integers in [0, {K}), got {labels.tolist()}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(labels.size), labels] = 1.0
    return -ad.sum(ad.log_softmax(logits, axis=-1) * onehot) / labels.size


def combined_loss(l_event, l_scene, lambda1=1.0, lambda2=1.0):
    return l_event * lambda1 + l_scene * lambda2


# -- optimiser -------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; bias-corrected moments."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, mask=None):
        """One update; ``mask[i] is False`` freezes parameter i entirely."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.step_count
        c2 = 1 - b2 ** self.step_count
        for i, p in enumerate(self.params):
            if mask is not None and not mask[i]:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_step(p.data, g, self.m[i], self.v[i], self.lr, b1, b2, self.eps,
                       self.weight_decay, c1, c2)

    def state(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}


def adamw_step(p, g, m, v, lr, beta1, beta2, eps, weight_decay, c1, c2):
    """In-place update of arrays ``p``, ``m``, ``v``; ``c1``/``c2`` are bias corrections."""
    p *= 1 - lr * weight_decay
    m *= beta1
    m += (1 - beta1) * g
    v *= beta2
    v += (1 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# -- data --------------------------------------------------------------------

@dataclass
class Dataset:
    """Features (N, T, 64), scene labels (N,), projected event targets (N, n)."""

    features: np.ndarray
    labels: np.ndarray
    event_targets: np.ndarray | None = None
    clip_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 3:
            raise DimensionError(f"features must be (N, T, 64), got {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise DimensionError("features and labels differ in length")
        if self.event_targets is not None:
            self.event_targets = np.asarray(self.event_targets, dtype=np.float64)
            if self.event_targets.shape[0] != len(self.features):
                raise DimensionError("features and event targets differ in length")

    def __len__(self):
        return len(self.labels)


@dataclass
class TrainResult:
    model: ERGLNet
    reports: list
    best_epoch: int
    best_state: dict
    optimizer: AdamW


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2 and n >= 2:
            # a lone trailing clip would make batch statistics degenerate
            continue
        yield idx


def train(config, train_set, val_set=None, model=None, on_epoch=None, freeze=None):
    """Joint optimisation of L = lambda1 * L_event + lambda2 * L_scene.

    ``freeze`` is an optional predicate on parameter names; matching
    parameters are excluded from every update.  The returned state is the
    last epoch with the highest validation accuracy (the final epoch when no
    validation set is given).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if train_set.event_targets is None:
        raise ValueError("training set needs event targets (projected pseudo labels)")
    if train_set.event_targets.shape[1] != config.n_events:
        raise DimensionError(
            f"event targets have {train_set.event_targets.shape[1]} columns, config expects n={config.n_events}"
        )
    with ad.precision(config.precision):
        return _train(config, train_set, val_set, model, on_epoch, freeze)


def _train(config, train_set, val_set, model, on_epoch, freeze):
    dtype = ad.get_default_dtype()
    model = model or ERGLNet(config.model_config(), seed=config.seed)
    names = [k for k, _ in model.named_parameters()]
    params = model.parameters()
    opt = AdamW(params, config.lr, config.betas, config.adam_eps, config.weight_decay)
    mask = None if freeze is None else [not freeze(k) for k in names]
    rng = np.random.default_rng(config.seed + 7919)
    feats = train_set.features.astype(dtype, copy=False)
    targets = train_set.event_targets.astype(dtype)

    reports, best, best_epoch, best_state = [], -1.0, 0, None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        sums = np.zeros(3)
        correct = seen = 0
        for idx in _batches(len(train_set), config.batch_size, rng):
            ad.clear_tape()
            model.zero_grad()
            out = model(ad.Tensor(feats[idx]))
            le = event_loss(out.event_probs, ad.Tensor(targets[idx]))
            ls = scene_loss(out.logits, train_set.labels[idx])
            loss = combined_loss(le, ls, config.lambda1, config.lambda2)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericalError(f"non-finite loss {lv} at epoch {epoch}")
            ad.backward(loss)
            opt.step(mask)
            k = len(idx)
            sums += k * np.array([float(le.data), float(ls.data), lv])
            correct += int((out.logits.data.argmax(axis=1) == train_set.labels[idx]).sum())
            seen += k
        L_event, L_scene, _ = sums / seen
        val_acc = None
        if val_set is not None and len(val_set):
            val_acc = accuracy(predict_logits(model, val_set.features).argmax(axis=1), val_set.labels)
        rep = EpochReport(
            epoch=epoch, L_event=float(L_event), L_scene=float(L_scene),
            L_total=float(config.lambda1 * L_event + config.lambda2 * L_scene),
            scene_accuracy=correct / seen, val_accuracy=val_acc,
            wall_time=time.perf_counter() - t0,
        )
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep)
        log.debug("epoch %d: %s", epoch, rep)
        score = val_acc if val_acc is not None else epoch
        # ties go to the later, more converged epoch
        if best_state is None or score >= best:
            best, best_epoch = score, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    return TrainResult(model, reports, best_epoch, best_state, opt)


# -- inference & evaluation --------------------------------------------------

def predict_outputs(model, features, batch_size=32):
    """Eval-mode forward in chunks; returns (event_probs, logits) numpy arrays."""
    model.eval()
    probs, logits = [], []
    dtype = model.parameters()[0].data.dtype
    with ad.no_grad():
        for s in range(0, len(features), batch_size):
            out = model(ad.Tensor(np.asarray(features[s:s + batch_size], dtype=dtype), dtype=dtype))
            probs.append(out.event_probs.data)
            logits.append(out.logits.data)
    return np.concatenate(probs), np.concatenate(logits)


def predict_logits(model, features, batch_size=32):
    return predict_outputs(model, features, batch_size)[1]


def accuracy(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float((pred == labels).mean()) if labels.size else float("nan")


def confusion_matrix(pred, labels, n_classes=10):
    """Rows are true labels, columns predicted labels."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(pred)), 1)
    return cm


def evaluate(model, dataset, n_classes=None):
    n_classes = n_classes or model.config.n_scenes
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty split")
    pred = predict_logits(model, dataset.features).argmax(axis=1)
    return accuracy(pred, dataset.labels), confusion_matrix(pred, dataset.labels, n_classes)
