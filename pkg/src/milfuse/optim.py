"""AdamW with decoupled weight decay and a linear-warmup/cosine-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MissingGradError, StepOutOfRangeError


@dataclass(frozen=True)
class Schedule:
    """Linear ramp from warmup_lr to base_lr, then cosine decay to zero."""

    base_lr: float
    warmup_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")


def lr_at(step: int, s: Schedule) -> float:
    """Learning rate at an optimizer step in [0, total_steps]."""
    if not 0 <= step <= s.total_steps:
        raise StepOutOfRangeError(f"step {step} outside [0, {s.total_steps}]")
    if step <= s.warmup_steps:
        if s.warmup_steps == 0:
            return s.base_lr
        frac = step / s.warmup_steps
        return s.warmup_lr + (s.base_lr - s.warmup_lr) * frac
    span = s.total_steps - s.warmup_steps
    frac = (step - s.warmup_steps) / span
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay plus bias-corrected Adam moments.

    The decay ``theta <- theta - lr * wd * theta`` is applied separately
    from the moment update, so a zero gradient with nonzero decay still
    shrinks the parameter. Update math runs in float64 and rounds back to
    the parameter dtype; everything is deterministic.
    """

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999),
                 weight_decay: float = 0.05, eps: float = 1e-8):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(p.shape, dtype=np.float64) for n, p in self.params}
        self.v = {n: np.zeros(p.shape, dtype=np.float64) for n, p in self.params}

    def zero_grad(self):
        """Reset gradients to zeros so unreached parameters read as zero."""
        for _, p in self.params:
            p.grad = np.zeros(p.shape, dtype=p.data.dtype)

    def step(self, lr: float | None = None):
        """Apply one update using the accumulated gradients."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradError(f"no gradient for {name!r}")
            g = p.grad.astype(np.float64, copy=False)
            theta = p.data.astype(np.float64, copy=False)
            if self.weight_decay:
                theta = theta * (1.0 - lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = np.ascontiguousarray((theta - lr * update).astype(p.data.dtype))
