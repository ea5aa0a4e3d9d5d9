from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

PAD_ID = 0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by teacher and student encoders.

    ``num_layers`` is the number of distinct blocks for a teacher and the number
    of recursion iterations for a student. ``embedding_rank=None`` means
    full rank (no factorization). ``adapter_bottleneck=0`` disables adapters.
    """

    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    num_layers: int = 4
    vocab_size: int = 100
    max_positions: int = 64
    embedding_rank: int | None = None
    adapter_bottleneck: int = 0
    adapter_nonlinearity: str = "gelu"
    adapter_placement: str = "input"
    dropout_prob: float = 0.1
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("hidden_dim", "num_heads", "ffn_dim", "num_layers", "vocab_size", "max_positions"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}")
        if self.embedding_rank is not None and not 0 < self.embedding_rank <= self.hidden_dim:
            raise ConfigError(f"embedding_rank must be in [1, hidden_dim], got {self.embedding_rank}")
        if not 0 <= self.adapter_bottleneck < self.hidden_dim:
            raise ConfigError(f"adapter_bottleneck must be in [0, hidden_dim), got {self.adapter_bottleneck}")
        if self.adapter_nonlinearity not in ("relu", "gelu"):
            raise ConfigError(f"adapter_nonlinearity must be relu or gelu, got {self.adapter_nonlinearity!r}")
        if self.adapter_placement not in ("input", "post"):
            raise ConfigError(f"adapter_placement must be input or post, got {self.adapter_placement!r}")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ConfigError("dropout_prob must be in [0, 1)")
        if self.type_vocab_size < 0:
            raise ConfigError("type_vocab_size must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")

    @property
    def rank(self) -> int:
        return self.hidden_dim if self.embedding_rank is None else self.embedding_rank

    @property
    def factorized(self) -> bool:
        return self.rank < self.hidden_dim

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def block_parameter_count(d: int, ffn: int) -> int:
    """Parameters in one post-LN transformer block."""
    return 4 * (d * d + d) + d * ffn + ffn + ffn * d + d + 4 * d


def adapter_parameter_count(d: int, b: int) -> int:
    return d * b + b + b * d + d


def solve_adapter_bottleneck(d: int, iterations: int, target: float = 0.9e6) -> int:
    """Bottleneck width whose 2L adapters come closest to a parameter budget."""
    return min(
        range(1, d),
        key=lambda b: abs(2 * iterations * adapter_parameter_count(d, b) - target),
    )


# Architectures of the published recursive students (BERT-base sized teacher).
_BASE = dict(
    hidden_dim=768, num_heads=12, ffn_dim=3072, num_layers=12, vocab_size=30522, max_positions=512
)
PRESETS: dict[str, ModelConfig] = {
    "bert-base": ModelConfig(**_BASE),
    "minialbert-768": ModelConfig(**_BASE),
    "minialbert-768-adapter": ModelConfig(**_BASE, adapter_bottleneck=24),
    "minialbert-312": ModelConfig(**_BASE, embedding_rank=312, adapter_bottleneck=24),
    "minialbert-128": ModelConfig(**_BASE, embedding_rank=128, adapter_bottleneck=24),
}
