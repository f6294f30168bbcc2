"""Dynamic gates that fuse the text stream with the cross-attention stream.

All four variants produce a gate value g in [0, 1] and fuse as

    h_fused = g * h_text + (1 - g) * h_cross

Soft gates are sigmoid outputs of a linear map on [h_text; h_cross],
either per feature (B,T,d) or per token (B,T,1). Hard gates hold
two-class logits; in train mode the logits are perturbed with Gumbel
noise, divided by a temperature, and softmaxed (the class-0 probability
is the gate, kept soft so gradients flow without a straight-through
estimator). In inference mode the gate is the argmax one-hot, computed
without consuming any randomness. Ties resolve to class 0 (keep text).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from . import tensor as T
from .tensor import Tensor

HARD_VARIANTS = ("hard_feature", "hard_token")
SOFT_VARIANTS = ("soft_feature", "soft_token")


def gate_output_width(variant: str, d_model: int) -> int:
    """Width of the gate's linear-map output for each variant."""
    widths = {
        "soft_feature": d_model,
        "soft_token": 1,
        "hard_feature": 2 * d_model,
        "hard_token": 2,
    }
    if variant not in widths:
        raise InvalidArgument(f"unknown gate variant {variant!r}")
    return widths[variant]


@dataclass
class TemperatureSchedule:
    """Linear Gumbel temperature anneal over the image-caption step budget.

    tau runs from `tau_start` at step 0 to `tau_end` at
    `anneal_fraction * total_image_steps`, and stays clamped at `tau_end`
    afterwards.
    """

    total_image_steps: int
    tau_start: float = 1.0
    tau_end: float = 0.1
    anneal_fraction: float = 0.8

    def tau_at(self, image_caption_step: int) -> float:
        if image_caption_step < 0:
            raise InvalidArgument(f"negative step: {image_caption_step}")
        span = self.anneal_fraction * self.total_image_steps
        if span <= 0 or image_caption_step >= span:
            return self.tau_end  # clamp is exact, not 1.0 - 0.9*1.0
        frac = image_caption_step / span
        return self.tau_start + (self.tau_end - self.tau_start) * frac


def _fuse(g: Tensor, h_text: Tensor, h_cross: Tensor) -> Tensor:
    if g.shape != h_text.shape:
        g = T.broadcast_to(g, h_text.shape)
    one_minus = T.add(T.mul(g, -1.0), 1.0)
    fused = T.add(T.mul(h_text, g), T.mul(h_cross, one_minus))
    fused.op = "gate_fuse"
    return fused


def apply_gate(variant: str, h_text: Tensor, h_cross: Tensor, w: Tensor, b: Tensor, *,
               tau: float | None = None, mode: str = "train", rng=None,
               noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Fuse the two streams; returns (h_fused, gate_values).

    `gate_values` has shape (B,T,d) for feature variants and (B,T,1) for
    token variants. Hard variants need `tau` and a noise source in train
    mode; pass `noise` to freeze the Gumbel draws (tests), otherwise draws
    come from rng.gumbel("gumbel", ...).
    """
    if h_text.shape != h_cross.shape:
        raise InvalidArgument(f"stream shapes differ: {h_text.shape} vs {h_cross.shape}")
    if mode not in ("train", "infer"):
        raise InvalidArgument(f"mode must be 'train' or 'infer', got {mode!r}")
    B, L, d = h_text.shape
    x = T.concat_last([h_text, h_cross])
    logits = T.add(T.matmul(x, w), T.broadcast_to(b, (B, L, w.shape[-1])))

    if variant in SOFT_VARIANTS:
        g = T.sigmoid(logits)
        return _fuse(g, h_text, h_cross), g

    if variant not in HARD_VARIANTS:
        raise InvalidArgument(f"unknown gate variant {variant!r}")

    two_class = (B, L, d, 2) if variant == "hard_feature" else (B, L, 2)
    logits = T.reshape(logits, two_class)

    if mode == "infer":
        # Deterministic one-hot selection; no noise is drawn.
        raw = logits.data
        keep_text = raw[..., 0] >= raw[..., 1]
        if variant == "hard_token":
            keep_text = keep_text[..., None]
        g_vals = Tensor(keep_text.astype(h_text.dtype), dtype=h_text.dtype, op="gate_hard")
        fused = T.where(keep_text, h_text, h_cross)
        fused.op = "gate_fuse"
        return fused, g_vals

    if tau is None or tau <= 0:
        raise InvalidArgument(f"hard gate in train mode needs tau > 0, got {tau}")
    if noise is None:
        if rng is None:
            raise InvalidArgument("hard gate in train mode needs an rng or frozen noise")
        noise = rng.gumbel("gumbel", two_class)
    noise = np.asarray(noise, dtype=h_text.dtype)
    if noise.shape != two_class:
        raise InvalidArgument(f"noise shape {noise.shape} != {two_class}")
    perturbed = T.mul(T.add(logits, noise), 1.0 / tau)
    y = T.softmax_last(perturbed)
    g = T.slice_last(y, 0, 1)
    g = T.reshape(g, (B, L, d) if variant == "hard_feature" else (B, L, 1))
    return _fuse(g, h_text, h_cross), g
