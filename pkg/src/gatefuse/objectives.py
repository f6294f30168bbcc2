"""Training objectives: next-token prediction plus optional contrastive terms.

The global contrastive term scores mean-pooled text against the image
encoding with a symmetric InfoNCE over both matching directions. The
word-level contrastive term scores every valid token's first-layer hidden
state against every image, pairing an image-axis normalization with a
cross-caption negative pool. Both use learnable log-temperatures that are
clamped by projection after each optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .errors import InvalidArgument

CLIP_TAU_RANGE = (0.05, 1.0)
LCG_TAU_RANGE = (0.05, 2.0)


def ntp_loss(logits: Tensor, token_ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
    """Cross-entropy of each position's next token, averaged over real targets.

    Position t is scored against token t+1; targets that are padding do not
    contribute. Sequences therefore need at least 2 tokens.
    """
    B, L, _ = logits.shape
    if L < 2:
        raise InvalidArgument("need at least 2 positions for next-token loss")
    targets = token_ids[:, 1:]
    mask = pad_mask[:, 1:]
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise InvalidArgument("no valid next-token targets in batch")
    lp = T.log_softmax_last(T.narrow(logits, 1, 0, L - 1))
    picked = T.gather_last(lp, targets)
    masked = T.mul(picked, mask.astype(logits.dtype))
    return T.mul(T.sum_axis(masked), -1.0 / n_valid)


def _project(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = T.matmul(x, w)
    return T.add(y, T.broadcast_to(b, y.shape))


def _inv_tau(log_tau: Tensor, shape) -> Tensor:
    inv = T.exp(T.mul(log_tau, -1.0))
    return T.broadcast_to(T.reshape(inv, (1,) * len(shape)), shape)


def clip_loss(pooled_text: Tensor, image_encoding: Tensor, text_w: Tensor, text_b: Tensor,
              image_w: Tensor, image_b: Tensor, log_tau: Tensor) -> Tensor:
    """Symmetric InfoNCE between pooled text and image encodings.

    Both sides are projected, L2-normalized, and compared at similarity / tau.
    The loss is the mean of the two cross-entropies (rows: text -> image,
    columns: image -> text) against the diagonal pairing.
    """
    if pooled_text.shape != image_encoding.shape:
        raise InvalidArgument(
            f"pooled text {pooled_text.shape} vs image {image_encoding.shape}")
    B = pooled_text.shape[0]
    t = T.l2_normalize_last(_project(pooled_text, text_w, text_b))
    i = T.l2_normalize_last(_project(image_encoding, image_w, image_b))
    sims = T.matmul(t, T.transpose(i, (1, 0)))
    s = T.mul(sims, _inv_tau(log_tau, sims.shape))
    diag_idx = np.arange(B)
    row_nll = T.add(T.logsumexp_last(s), T.mul(T.gather_last(s, diag_idx), -1.0))
    s_t = T.transpose(s, (1, 0))
    col_nll = T.add(T.logsumexp_last(s_t), T.mul(T.gather_last(s_t, diag_idx), -1.0))
    both = T.add(T.sum_axis(row_nll), T.sum_axis(col_nll))
    return T.mul(both, 0.5 / B)


def lcg_loss(first_layer_hidden: Tensor, image_encoding: Tensor, valid_mask: np.ndarray,
             m_text: Tensor, m_image: Tensor, log_tau: Tensor) -> Tensor:
    """Word-level grounding loss over first-layer hidden states.

    Scores s[i, k, j] pair image i with token j of caption k. Each valid
    token of caption i contributes two negative-log-likelihoods: the correct
    image among all images for that token, and the correct token against all
    valid tokens of the other captions under image i. The result is the mean
    of half their sum over valid tokens.
    """
    B, L, d = first_layer_hidden.shape
    if image_encoding.shape != (B, d):
        raise InvalidArgument(
            f"image encoding {image_encoding.shape} does not match hidden ({B},{L},{d})")
    valid = np.asarray(valid_mask, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise InvalidArgument("no valid tokens for the word-level loss")

    a = T.matmul(image_encoding, T.transpose(m_image, (1, 0)))        # (B, proj)
    p = T.matmul(first_layer_hidden, T.transpose(m_text, (1, 0)))     # (B, L, proj)
    flat = T.reshape(p, (B * L, p.shape[-1]))
    scores = T.matmul(a, T.transpose(flat, (1, 0)))                    # (B, B*L)
    scores = T.mul(scores, _inv_tau(log_tau, scores.shape))
    z = T.reshape(scores, (B, B, L))                                   # [image, caption, token]
    # Constant shift for stable exponentials; cancels in both ratios.
    z = T.add(z, -float(z.data.max()))

    z_cap = T.transpose(z, (1, 2, 0))                                  # [caption, token, image]
    pos_idx = np.broadcast_to(np.arange(B)[:, None], (B, L))
    pos = T.gather_last(z_cap, pos_idx)                                # (B, L): z[i, i, j]
    image_nll = T.add(T.logsumexp_last(z_cap), T.mul(pos, -1.0))

    fvalid = valid.astype(z.dtype)
    exp_masked = T.mul(T.exp(z), fvalid[None, :, :])                   # zero padded tokens
    all_rows = T.sum_axis(exp_masked, axis=(1, 2))                     # (B,)
    own = T.sum_axis(T.mul(exp_masked, np.eye(B, dtype=z.dtype)[:, :, None]), axis=(1, 2))
    others = T.add(all_rows, T.mul(own, -1.0))                         # cross-caption pool
    neg = T.add(T.exp(pos), T.broadcast_to(T.reshape(others, (B, 1)), (B, L)))
    token_nll = T.add(T.log(neg), T.mul(pos, -1.0))

    per_token = T.mul(T.add(image_nll, token_nll), 0.5)
    total = T.sum_axis(T.mul(per_token, fvalid))
    return T.mul(total, 1.0 / n_valid)


@dataclass
class LossReport:
    """Loss composition for one step: total = ntp + lambda * aux."""

    ntp: Tensor
    aux: Tensor | None
    total: Tensor
    lambda_aux: float

    def row(self) -> tuple[float, float, float]:
        aux = float(self.aux.data) if self.aux is not None else 0.0
        return float(self.ntp.data), aux, float(self.total.data)


def total_loss(model, trace, batch, lambda_aux: float = 1.0) -> LossReport:
    """NTP plus the configured auxiliary term on image-caption batches.

    Auxiliary terms need the full pairing structure, so mixed batches (from
    the single-loader curriculum) and text-only batches contribute NTP only.
    """
    ntp = ntp_loss(trace.logits, batch.token_ids, batch.pad_mask)
    objective = model.config.objective
    aux = None
    if batch.modality == "image_caption" and objective != "ntp":
        p = model.params
        if objective == "ntp_clip":
            aux = clip_loss(trace.pooled_text, trace.image_encoding,
                            p["clip.text_proj.w"], p["clip.text_proj.b"],
                            p["clip.image_proj.w"], p["clip.image_proj.b"],
                            p["clip.log_tau"])
        elif objective == "ntp_lcg":
            aux = lcg_loss(trace.first_layer_hidden, trace.image_encoding,
                           batch.pad_mask, p["lcg.m_text"], p["lcg.m_image"],
                           p["lcg.log_tau"])
    total = ntp if aux is None else T.add(ntp, T.mul(aux, lambda_aux))
    return LossReport(ntp=ntp, aux=aux, total=total, lambda_aux=lambda_aux)


def project_temperature_clamps(params: dict[str, Tensor]) -> None:
    """Clamp learnable log-temperatures back into range after an optimizer step."""
    for name, (lo, hi) in (("clip.log_tau", CLIP_TAU_RANGE), ("lcg.log_tau", LCG_TAU_RANGE)):
        p = params.get(name)
        if p is not None:
            np.clip(p.data, math.log(lo), math.log(hi), out=p.data)
