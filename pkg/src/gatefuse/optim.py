"""AdamW with decoupled weight decay, global-norm clipping, and the
warmup-plus-cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericError
from .tensor import Tensor


@dataclass
class LrSchedule:
    """Linear warmup to `peak_lr`, then cosine decay to zero at `total_steps`."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps <= 0 or not (0 <= self.warmup_steps <= self.total_steps):
            raise InvalidArgument(
                f"bad schedule: warmup={self.warmup_steps}, total={self.total_steps}")

    def lr_at(self, step: int) -> float:
        if not (0 <= step <= self.total_steps):
            raise InvalidArgument(f"step {step} outside [0, {self.total_steps}]")
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        if self.total_steps == self.warmup_steps:
            return self.peak_lr
        frac = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.peak_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most `max_norm`.

    Returns the pre-clip norm. Grads at or under the threshold are untouched.
    """
    if max_norm <= 0:
        raise InvalidArgument(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for p in params.values():
        g = p._grad
        if g is None:
            continue
        total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise NumericError(f"non-finite gradient norm: {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p._grad is not None:
                p._grad *= scale
    return norm


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    Moments are keyed by parameter name so they serialize into checkpoints
    alongside the parameters themselves.
    """

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        """One update using each parameter's accumulated grad (missing grad = zero)."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p._grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name][...] = state["m"][name]
            self.v[name][...] = state["v"][name]
