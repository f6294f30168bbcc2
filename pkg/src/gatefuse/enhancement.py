"""Feature-wise enhancement transforms applied between the two streams.

Three mechanisms, each replacing exactly one stream at its configured
integration point:

* FiLM: gamma * h + beta, with gamma and beta linear in the conditioning
  stream. Initialized at identity (gamma=1, beta=0).
* DyIntra: (1 + sigmoid(Linear(cond))) * h, a multiplicative scale in (1, 2).
* Channel attention: squeeze-excitation style sigmoid(W2 relu(W1 h)) * h,
  no conditioning stream, reduction ratio 16.
"""

from __future__ import annotations

from . import tensor as T
from .tensor import Tensor
from .errors import InvalidArgument


def _affine_map(cond: Tensor, w: Tensor, b: Tensor, out_shape) -> Tensor:
    y = T.add(T.matmul(cond, w), T.broadcast_to(b, cond.shape[:-1] + (w.shape[-1],)))
    if y.shape != tuple(out_shape):
        y = T.broadcast_to(y, out_shape)
    return y


def film(h: Tensor, cond: Tensor, gamma_w: Tensor, gamma_b: Tensor,
         beta_w: Tensor, beta_b: Tensor) -> Tensor:
    """gamma(cond) * h + beta(cond), broadcasting cond over positions."""
    gamma = _affine_map(cond, gamma_w, gamma_b, h.shape)
    beta = _affine_map(cond, beta_w, beta_b, h.shape)
    out = T.add(T.mul(gamma, h), beta)
    out.op = "film"
    return out


def dyintra(h: Tensor, cond: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """(1 + sigmoid(Linear(cond))) * h; the scale lives strictly in (1, 2)."""
    pre = _affine_map(cond, w, b, h.shape)
    scale = T.add(T.sigmoid(pre), 1.0)
    out = T.mul(scale, h)
    out.op = "dyintra"
    return out


def channel_attention(h: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """sigmoid(W2 relu(W1 h)) * h, gating each channel by its own statistics."""
    if w1.shape[0] != h.shape[-1] or w2.shape[-1] != h.shape[-1]:
        raise InvalidArgument(
            f"channel attention weights {w1.shape}/{w2.shape} do not match width {h.shape[-1]}")
    s = T.sigmoid(T.matmul(T.relu(T.matmul(h, w1)), w2))
    out = T.mul(s, h)
    out.op = "channel_attention"
    return out
