"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, clear_tape, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error <= self.tol

    def failures(self):
        return {k: v for k, v in self.per_param.items() if v > self.tol}


def _rel_error(analytic, numeric, floor):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(f, params, eps=1e-5, tol=1e-4, floor=1e-6, max_entries=None, rng=None):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    ``params`` is a mapping name -> Tensor (or a list of tensors).  ``f`` must be
    deterministic; run normalisation layers in eval mode while checking.
    ``floor`` keeps the relative error finite where both gradients vanish.
    ``max_entries`` subsamples large tensors (entries chosen by ``rng``).
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = rng if rng is not None else np.random.default_rng(0)

    clear_tape()
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    per_param = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            num = np.empty(idx.size)
            for k, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                num[k] = (fp - fm) / (2 * eps)
            ana = analytic[name].reshape(-1)[idx]
            err = _rel_error(ana, num, floor)
            per_param[name] = float(err.max()) if err.size else 0.0
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_error=worst, tol=tol, per_param=per_param)
