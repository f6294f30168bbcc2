"""Dual-stream autoregressive transformer with a gated fusion path.

The text stream is a pre-LN decoder: masked self-attention, cross-attention
to a 1-token image encoding, a dynamic gate that fuses the two streams, and
a feed-forward block. The image stream projects a single global embedding
to model width and runs one of three encoder stacks (transformer, 2-layer
MLP, or the projection alone).

Text-only batches never touch the image path: their outputs are bitwise
independent of whatever image tensors are supplied. Mixed batches select per
row between the fused path and the plain text path, so text rows match the
text-only computation exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .config import ModelConfig
from .enhancement import channel_attention, dyintra, film
from .errors import InvalidArgument
from .gating import apply_gate, gate_output_width
from .rng import RngPool

NEG_INF = -1e9
TEMP_INIT = 0.07


def _attention_shapes(prefix: str, d: int):
    for part in ("q", "k", "v", "o"):
        yield f"{prefix}.w{part}", (d, d), "trunc_normal"
        yield f"{prefix}.b{part}", (d,), "zeros"


def _ln_shapes(prefix: str, d: int):
    yield f"{prefix}.gain", (d,), "ones"
    yield f"{prefix}.bias", (d,), "zeros"


def _ffn_shapes(prefix: str, d: int, hidden: int):
    yield f"{prefix}.w1", (d, hidden), "trunc_normal"
    yield f"{prefix}.b1", (hidden,), "zeros"
    yield f"{prefix}.w2", (hidden, d), "trunc_normal"
    yield f"{prefix}.b2", (d,), "zeros"


def _film_shapes(prefix: str, d: int):
    # Identity start: gamma(cond) = 1, beta(cond) = 0 for any conditioning.
    yield f"{prefix}.gamma.w", (d, d), "zeros"
    yield f"{prefix}.gamma.b", (d,), "ones"
    yield f"{prefix}.beta.w", (d, d), "zeros"
    yield f"{prefix}.beta.b", (d,), "zeros"


def parameter_shapes(cfg: ModelConfig):
    """Yield (name, shape, init) for every trainable parameter of this variant.

    This enumeration is the single source of truth: the model allocates from
    it and the parameter counter sums over it.
    """
    d, hidden = cfg.d_model, cfg.hidden_dim
    yield "embed.tok", (cfg.vocab_size, d), "trunc_normal"
    yield "embed.pos", (cfg.max_seq_len, d), "trunc_normal"

    yield "image.proj.w", (cfg.image_embedding_dim, d), "trunc_normal"
    yield "image.proj.b", (d,), "zeros"
    if cfg.image_encoder_kind == "transformer":
        for i in range(cfg.n_image_encoder_layers):
            yield from _ln_shapes(f"image.enc{i}.ln1", d)
            yield from _attention_shapes(f"image.enc{i}.attn", d)
            yield from _ln_shapes(f"image.enc{i}.ln2", d)
            yield from _ffn_shapes(f"image.enc{i}.ffn", d, hidden)
        yield from _ln_shapes("image.final_ln", d)
    elif cfg.image_encoder_kind == "mlp":
        yield from _ffn_shapes("image.mlp", d, hidden)

    for i in range(cfg.n_decoder_layers):
        yield from _ln_shapes(f"dec{i}.ln1", d)
        yield from _attention_shapes(f"dec{i}.self_attn", d)
        yield from _ln_shapes(f"dec{i}.ln2", d)
        yield from _attention_shapes(f"dec{i}.cross_attn", d)
        if cfg.gate_variant != "none":
            width = gate_output_width(cfg.gate_variant, d)
            yield f"dec{i}.gate.w", (2 * d, width), "trunc_normal"
            yield f"dec{i}.gate.b", (width,), "zeros"
        if cfg.enhancement in ("film_text", "film_cross"):
            yield from _film_shapes(f"dec{i}.enh", d)
        elif cfg.enhancement in ("dyintra_text", "dyintra_cross"):
            yield f"dec{i}.enh.w", (d, d), "trunc_normal"
            yield f"dec{i}.enh.b", (d,), "zeros"
        yield from _ln_shapes(f"dec{i}.ln3", d)
        yield from _ffn_shapes(f"dec{i}.ffn", d, hidden)

    yield from _ln_shapes("final_ln", d)
    if not cfg.tie_output_weights:
        yield "out.w", (d, cfg.vocab_size), "trunc_normal"
    yield "out.b", (cfg.vocab_size,), "zeros"

    if cfg.enhancement == "film_image":
        yield from _film_shapes("enh_image", d)
    elif cfg.enhancement == "dyintra_image":
        yield "enh_image.w", (d, d), "trunc_normal"
        yield "enh_image.b", (d,), "zeros"
    elif cfg.enhancement == "channel_attention":
        squeeze = max(1, d // 16)
        yield "enh_image.w1", (d, squeeze), "trunc_normal"
        yield "enh_image.w2", (squeeze, d), "trunc_normal"

    if cfg.objective == "ntp_clip":
        yield "clip.text_proj.w", (d, d), "trunc_normal"
        yield "clip.text_proj.b", (d,), "zeros"
        yield "clip.image_proj.w", (d, d), "trunc_normal"
        yield "clip.image_proj.b", (d,), "zeros"
        yield "clip.log_tau", (), "log_temp"
    elif cfg.objective == "ntp_lcg":
        yield "lcg.m_text", (d, d), "trunc_normal"
        yield "lcg.m_image", (d, d), "trunc_normal"
        yield "lcg.log_tau", (), "log_temp"


def count_parameters(cfg: ModelConfig) -> int:
    """Exact trainable-scalar count for the configured variant. No allocation."""
    total = 0
    for _, shape, _ in parameter_shapes(cfg):
        total += int(np.prod(shape)) if shape else 1
    return total


@dataclass
class ForwardTrace:
    """Everything one forward pass exposes to losses and analysis."""

    logits: Tensor                       # (B, T, vocab)
    first_layer_hidden: Tensor           # (B, T, d): layer-1 self-attention residual
    pooled_text: Tensor                  # (B, d): masked mean of the embedding output
    image_encoding: Tensor | None        # (B, d) or None for text-only batches
    gate_values: list[Tensor] | None     # per layer, (B,T,d) or (B,T,1)
    image_rows: np.ndarray | None        # which rows carry a real image (mixed batches)


class DualStreamModel:
    """Parameter store plus the forward computation."""

    def __init__(self, config: ModelConfig, rng: RngPool):
        self.config = config
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        for name, shape, init in parameter_shapes(config):
            self.params[name] = Tensor(self._init_array(name, shape, init),
                                       requires_grad=True)

    def _init_array(self, name: str, shape, init: str) -> np.ndarray:
        if init == "trunc_normal":
            return self.rng.truncated_normal(f"init/{name}", shape, 0.02)
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        if init == "log_temp":
            return np.array(math.log(TEMP_INIT))
        raise InvalidArgument(f"unknown init kind {init!r}")

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    # -- building blocks -----------------------------------------------------

    def _linear(self, prefix: str, x: Tensor, w: str = "w", b: str = "b") -> Tensor:
        weight = self.params[f"{prefix}.{w}"]
        bias = self.params[f"{prefix}.{b}"]
        y = T.matmul(x, weight)
        return T.add(y, T.broadcast_to(bias, y.shape))

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        normed = T.layer_norm_last(x, eps=self.config.layer_norm_eps)
        gain = T.broadcast_to(self.params[f"{prefix}.gain"], x.shape)
        bias = T.broadcast_to(self.params[f"{prefix}.bias"], x.shape)
        out = T.add(T.mul(normed, gain), bias)
        out.op = "ln_affine"
        return out

    def _heads(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        h = self.config.n_heads
        return T.transpose(T.reshape(x, (B, L, h, d // h)), (0, 2, 1, 3))

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor,
                   blocked: np.ndarray | None) -> Tensor:
        q = self._heads(self._linear(prefix, q_in, "wq", "bq"))
        k = self._heads(self._linear(prefix, kv_in, "wk", "bk"))
        v = self._heads(self._linear(prefix, kv_in, "wv", "bv"))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                       1.0 / math.sqrt(self.config.head_dim))
        if blocked is not None:
            scores = T.masked_fill(scores, blocked, NEG_INF)
        ctx = T.matmul(T.softmax_last(scores), v)
        B, _, L, _ = ctx.shape
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, self.config.d_model))
        return self._linear(prefix, ctx, "wo", "bo")

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        return self._linear(prefix, T.gelu(self._linear(prefix, x, "w1", "b1")), "w2", "b2")

    def _dropout(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.config.dropout_rate, self.rng.stream("dropout"))

    # -- streams ---------------------------------------------------------------

    def embed_text(self, token_ids: np.ndarray) -> Tensor:
        """Token plus learned positional embeddings, then dropout."""
        token_ids = np.asarray(token_ids)
        B, L = token_ids.shape
        if L > self.config.max_seq_len:
            raise InvalidArgument(
                f"sequence length {L} exceeds max_seq_len {self.config.max_seq_len}")
        tok = T.embedding(self.params["embed.tok"], token_ids)
        pos = T.embedding(self.params["embed.pos"], np.arange(L))
        x = T.add(tok, T.broadcast_to(T.reshape(pos, (1, L, self.config.d_model)), tok.shape))
        return self._dropout(x)

    def encode_image(self, image_embedding) -> Tensor:
        """Project the global image embedding and run the encoder stack.

        Returns a 1-token sequence (B, 1, d_model).
        """
        emb = image_embedding if isinstance(image_embedding, Tensor) \
            else Tensor(np.asarray(image_embedding))
        if emb.shape[-1] != self.config.image_embedding_dim:
            raise InvalidArgument(
                f"image embedding dim {emb.shape[-1]} != configured "
                f"{self.config.image_embedding_dim}")
        B = emb.shape[0]
        x = T.reshape(self._linear("image.proj", emb), (B, 1, self.config.d_model))
        kind = self.config.image_encoder_kind
        if kind == "transformer":
            for i in range(self.config.n_image_encoder_layers):
                normed = self._ln(f"image.enc{i}.ln1", x)
                a = self._attention(f"image.enc{i}.attn", normed, normed, None)
                x = T.add(x, self._dropout(a))
                f = self._ffn(f"image.enc{i}.ffn", self._ln(f"image.enc{i}.ln2", x))
                x = T.add(x, self._dropout(f))
            x = self._ln("image.final_ln", x)
        elif kind == "mlp":
            x = self._linear("image.mlp", T.gelu(self._linear("image.mlp", x, "w1", "b1")),
                             "w2", "b2")
        return x

    def decoder_layer(self, i: int, h: Tensor, image_enc: Tensor | None,
                      blocked: np.ndarray, *, tau: float | None = None,
                      gate_noise: np.ndarray | None = None,
                      image_rows: np.ndarray | None = None):
        """One decoder layer; returns (output, self_attn_residual, gate_values)."""
        cfg = self.config
        normed = self._ln(f"dec{i}.ln1", h)
        a = self._attention(f"dec{i}.self_attn", normed, normed, blocked)
        h_text = T.add(h, self._dropout(a))
        if image_enc is None:
            fused = h_text
            gate_vals = None
        else:
            h_t = h_text
            if cfg.enhancement == "film_text":
                h_t = film(h_t, image_enc, *self._film_params(f"dec{i}.enh"))
            elif cfg.enhancement == "dyintra_text":
                h_t = dyintra(h_t, image_enc, self.params[f"dec{i}.enh.w"],
                              self.params[f"dec{i}.enh.b"])
            c = self._attention(f"dec{i}.cross_attn", self._ln(f"dec{i}.ln2", h_t),
                                image_enc, None)
            h_cross = T.add(h_t, self._dropout(c))
            if cfg.enhancement == "film_cross":
                h_cross = film(h_cross, image_enc, *self._film_params(f"dec{i}.enh"))
            elif cfg.enhancement == "dyintra_cross":
                h_cross = dyintra(h_cross, image_enc, self.params[f"dec{i}.enh.w"],
                                  self.params[f"dec{i}.enh.b"])
            if cfg.gate_variant == "none":
                fused_img = h_cross
                gate_vals = None
            else:
                mode = "train" if T.is_training() else "infer"
                fused_img, gate_vals = apply_gate(
                    cfg.gate_variant, h_t, h_cross,
                    self.params[f"dec{i}.gate.w"], self.params[f"dec{i}.gate.b"],
                    tau=tau, mode=mode, rng=self.rng, noise=gate_noise)
            if image_rows is not None:
                fused = T.where(image_rows[:, None, None], fused_img, h_text)
            else:
                fused = fused_img
        f = self._ffn(f"dec{i}.ffn", self._ln(f"dec{i}.ln3", fused))
        out = T.add(fused, self._dropout(f))
        return out, h_text, gate_vals

    def _film_params(self, prefix: str):
        return (self.params[f"{prefix}.gamma.w"], self.params[f"{prefix}.gamma.b"],
                self.params[f"{prefix}.beta.w"], self.params[f"{prefix}.beta.b"])

    # -- full forward ------------------------------------------------------------

    def forward(self, batch, tau: float | None = None,
                gate_noise: list | None = None) -> ForwardTrace:
        cfg = self.config
        ids = batch.token_ids
        pad = batch.pad_mask
        B, L = ids.shape

        emb = self.embed_text(ids)
        mask3 = pad[:, :, None].astype(emb.dtype)
        counts = pad.sum(axis=1, keepdims=True).astype(emb.dtype)
        pooled = T.mul(T.sum_axis(T.mul(emb, mask3), axis=1), 1.0 / counts)

        use_image = batch.modality in ("image_caption", "mixed")
        image_rows = batch.image_rows if batch.modality == "mixed" else None
        enc = None
        if use_image:
            if batch.image_embedding is None:
                raise InvalidArgument(f"{batch.modality} batch lacks image embeddings")
            enc = self.encode_image(batch.image_embedding)
            if cfg.enhancement == "film_image":
                enc = film(enc, T.reshape(pooled, (B, 1, cfg.d_model)),
                           *self._film_params("enh_image"))
            elif cfg.enhancement == "dyintra_image":
                enc = dyintra(enc, T.reshape(pooled, (B, 1, cfg.d_model)),
                              self.params["enh_image.w"], self.params["enh_image.b"])
            elif cfg.enhancement == "channel_attention":
                enc = channel_attention(enc, self.params["enh_image.w1"],
                                        self.params["enh_image.w2"])

        causal = np.triu(np.ones((L, L), dtype=bool), k=1)
        blocked = causal[None, None, :, :] | (~pad)[:, None, None, :]

        h = emb
        first_hidden = None
        gate_values: list[Tensor] = []
        for i in range(cfg.n_decoder_layers):
            noise_i = gate_noise[i] if gate_noise is not None else None
            h, h_text, g = self.decoder_layer(i, h, enc, blocked, tau=tau,
                                              gate_noise=noise_i, image_rows=image_rows)
            if i == 0:
                first_hidden = h_text
            if g is not None:
                gate_values.append(g)

        h = self._ln("final_ln", h)
        if cfg.tie_output_weights:
            logits = T.matmul(h, T.transpose(self.params["embed.tok"], (1, 0)))
        else:
            logits = T.matmul(h, self.params["out.w"])
        logits = T.add(logits, T.broadcast_to(self.params["out.b"], logits.shape))

        return ForwardTrace(
            logits=logits,
            first_layer_hidden=first_hidden,
            pooled_text=pooled,
            image_encoding=T.reshape(enc, (B, cfg.d_model)) if enc is not None else None,
            gate_values=gate_values if gate_values else None,
            image_rows=image_rows,
        )
