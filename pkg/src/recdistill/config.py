"""JSON run configuration shared by all CLI subcommands."""

from __future__ import annotations

import json
import os
from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .distill import LossWeights
from .model import ConfigError, ModelConfig
from .train import PROFILES, TrainSettings


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    hidden_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    num_layers: int = 4
    vocab_size: Optional[int] = None
    max_positions: int = 130
    embedding_rank: Optional[int] = None
    adapter_bottleneck: int = 0
    adapter_nonlinearity: Literal["relu", "gelu"] = "gelu"
    adapter_placement: Literal["input", "post"] = "input"
    dropout_prob: float = 0.1
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02
    dtype: Literal["float64", "float32"] = "float64"

    @model_validator(mode="after")
    def _check(self):
        try:
            self.to_config(self.vocab_size or 100)
        except ConfigError as exc:
            raise ValueError(str(exc)) from None
        return self

    def to_config(self, vocab_size: int) -> ModelConfig:
        fields = self.model_dump()
        fields["vocab_size"] = vocab_size
        return ModelConfig(**fields)


class DataSection(_Section):
    corpus: Optional[str] = None
    vocab_size: int = 2000
    tokenizer: Literal["word", "char"] = "word"
    window: int = 128
    stride: int = 64
    max_per_doc: int = 10
    mask_prob: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    task: Optional[str] = None
    task_kind: Literal["sequence_classification", "token_classification"] = "sequence_classification"
    eval: Optional[str] = None
    max_len: int = 32

    @model_validator(mode="after")
    def _check(self):
        if not self.window > self.stride > 0:
            raise ValueError("need window > stride > 0")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError("mask_prob must be in [0, 1]")
        if abs(sum(self.mask_split) - 1.0) > 1e-9:
            raise ValueError("mask_split must sum to 1")
        return self


class ScheduleSection(_Section):
    steps: Optional[int] = None
    batch_size: Optional[int] = None
    peak_lr: Optional[float] = None
    warmup_steps: Optional[int] = None
    weight_decay: Optional[float] = None
    betas: Optional[tuple[float, float]] = None
    eps: Optional[float] = None
    clip_norm: Optional[float] = None
    epochs: Optional[int] = None
    snapshot_every: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        for name in ("steps", "batch_size", "epochs"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        return self


class WeightsSection(_Section):
    lambda_mlm: float = 1.0
    lambda_align: float = 3.0
    lambda_out: float = 5.0
    alignment: Literal["full", "hidden", "attention", "none", "hidden_only", "attention_only"] = "full"
    embed_loss: bool = False
    lambda_embed: float = 1.0
    raw_sums: bool = False
    align_mean: bool = False
    teacher_first: bool = False

    def to_weights(self) -> LossWeights:
        try:
            return LossWeights(
                lambda_mlm=self.lambda_mlm,
                lambda_align=self.lambda_align,
                lambda_out=self.lambda_out,
                alignment_mode=self.alignment,
                embed_loss_enabled=self.embed_loss,
                lambda_embed=self.lambda_embed,
                raw_sums=self.raw_sums,
                align_mean=self.align_mean,
                teacher_first=self.teacher_first,
            )
        except ConfigError as exc:
            raise ValueError(str(exc)) from None

    @model_validator(mode="after")
    def _check(self):
        self.to_weights()
        return self


class RunConfig(_Section):
    seed: int = 0
    output_dir: str
    profile: Literal["desk", "paper-pretrain", "paper-finetune", "paper-adapter-tune"] = "desk"
    teacher: ModelSection = ModelSection()
    student: ModelSection = ModelSection()
    teacher_checkpoint: Optional[str] = None
    checkpoint: Optional[str] = None
    layer_map: Literal["identity", "uniform_stride"] = "identity"
    data: DataSection = DataSection()
    schedule: ScheduleSection = ScheduleSection()
    weights: WeightsSection = WeightsSection()
    log_wall_time: bool = False
    init_embeddings_from_teacher: bool = False
    inject_adapters: bool = False
    adapter_bottleneck: Optional[int] = None
    head_dropout: float = 0.1

    def settings(self) -> TrainSettings:
        explicit = {k: v for k, v in self.schedule.model_dump().items() if v is not None}
        return replace(
            PROFILES[self.profile],
            seed=self.seed,
            mask_prob=self.data.mask_prob,
            mask_split=tuple(self.data.mask_split),
            log_wall_time=self.log_wall_time,
            **explicit,
        )


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {key} is not a section")
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a JSON run config. ``overrides`` maps dotted keys to values.

    The ``RD_SEED`` environment variable overrides ``seed``.
    """
    try:
        tree = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a JSON object")
    for key, value in (overrides or {}).items():
        _set_path(tree, key, value)
    if os.environ.get("RD_SEED"):
        try:
            tree["seed"] = int(os.environ["RD_SEED"])
        except ValueError:
            raise ConfigError("RD_SEED must be an integer") from None
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(format_validation_error(exc)) from None
