"""Model and training configuration.

Configs load from JSON with strict key checking: an unknown key anywhere is
an error, so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import DataFormatError, InvalidArgument

GATE_VARIANTS = ("none", "soft_feature", "soft_token", "hard_feature", "hard_token")
ENHANCEMENTS = ("none", "film_text", "film_cross", "film_image",
                "dyintra_text", "dyintra_cross", "dyintra_image", "channel_attention")
OBJECTIVES = ("ntp", "ntp_clip", "ntp_lcg")
IMAGE_ENCODER_KINDS = ("transformer", "mlp", "projection_only")
STRATEGIES = ("alternating", "text_first", "image_first", "nonuniform_mixed", "uniform_mixed")


@dataclass
class ModelConfig:
    d_model: int = 768
    hidden_dim: int = 3072
    n_heads: int = 8
    n_decoder_layers: int = 8
    n_image_encoder_layers: int = 5
    vocab_size: int = 50260
    max_seq_len: int = 128
    dropout_rate: float = 0.1
    layer_norm_eps: float = 1e-5
    image_embedding_dim: int = 768
    gate_variant: str = "soft_feature"
    enhancement: str = "none"
    objective: str = "ntp"
    # None resolves to True for the lcg objective, False otherwise.
    tie_output_weights: bool | None = None
    image_encoder_kind: str = "transformer"

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % self.n_heads != 0:
            raise InvalidArgument(
                f"d_model ({self.d_model}) must be positive and divisible by n_heads ({self.n_heads})")
        if self.vocab_size < 4:
            raise InvalidArgument("vocab_size must cover the 3 specials plus content")
        if self.max_seq_len < 2:
            raise InvalidArgument("max_seq_len must be at least 2")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise InvalidArgument(f"dropout_rate out of range: {self.dropout_rate}")
        for name, value, allowed in (
            ("gate_variant", self.gate_variant, GATE_VARIANTS),
            ("enhancement", self.enhancement, ENHANCEMENTS),
            ("objective", self.objective, OBJECTIVES),
            ("image_encoder_kind", self.image_encoder_kind, IMAGE_ENCODER_KINDS),
        ):
            if value not in allowed:
                raise InvalidArgument(f"{name} must be one of {allowed}, got {value!r}")
        if self.tie_output_weights is None:
            self.tie_output_weights = self.objective == "ntp_lcg"

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 5e-5
    warmup_fraction: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 42
    strategy: str = "alternating"
    epochs_per_modality: int = 10
    start_modality: str = "text"
    lambda_aux: float = 1.0
    tau_start: float = 1.0
    tau_end: float = 0.1
    tau_anneal_fraction: float = 0.8
    # "global" anneals over cumulative image-caption steps; "per_epoch" resets
    # the schedule at each image-caption epoch boundary.
    tau_anneal_domain: str = "global"
    checkpoint_interval: int = 500
    log_interval: int = 10
    precision: str = "f32"
    # Optional hard cap on optimizer steps; None runs the whole schedule.
    max_steps: int | None = None

    def __post_init__(self):
        if self.batch_size <= 0:
            raise InvalidArgument("batch_size must be positive")
        if self.strategy not in STRATEGIES:
            raise InvalidArgument(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.start_modality not in ("text", "image"):
            raise InvalidArgument("start_modality must be 'text' or 'image'")
        if self.precision not in ("f32", "f64"):
            raise InvalidArgument("precision must be 'f32' or 'f64'")
        if self.tau_anneal_domain not in ("global", "per_epoch"):
            raise InvalidArgument("tau_anneal_domain must be 'global' or 'per_epoch'")
        if not (0.0 < self.tau_anneal_fraction <= 1.0):
            raise InvalidArgument("tau_anneal_fraction must be in (0, 1]")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise InvalidArgument("warmup_fraction must be in [0, 1)")
        if self.epochs_per_modality <= 0:
            raise InvalidArgument("epochs_per_modality must be positive")


@dataclass
class DataConfig:
    text_corpus: str | None = None
    captions: str | None = None
    embeddings: str | None = None
    vocab: str | None = None
    validation_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        if self.validation_fraction < 0 or self.test_fraction < 0 \
                or self.validation_fraction + self.test_fraction >= 1.0:
            raise InvalidArgument("split fractions must be nonnegative and sum below 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _build_section(cls, raw: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise InvalidArgument(
            f"unknown key(s) in config section '{section}': {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise InvalidArgument(f"bad config section '{section}': {e}") from e


def config_from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - {"model", "training", "data"}
    if unknown:
        raise InvalidArgument(f"unknown top-level config key(s): {sorted(unknown)}")
    return RunConfig(
        model=_build_section(ModelConfig, raw.get("model", {}), "model"),
        training=_build_section(TrainConfig, raw.get("training", {}), "training"),
        data=_build_section(DataConfig, raw.get("data", {}), "data"),
    )


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "model": dataclasses.asdict(cfg.model),
        "training": dataclasses.asdict(cfg.training),
        "data": dataclasses.asdict(cfg.data),
    }


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise DataFormatError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise DataFormatError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise InvalidArgument("config root must be a JSON object")
    return config_from_dict(raw)
