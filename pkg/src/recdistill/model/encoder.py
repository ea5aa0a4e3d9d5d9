"""Teacher and recursive-student encoders with full forward traces."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..numerics import Tensor
from .config import PAD_ID, ConfigError, ModelConfig
from .layers import AdapterPair, Embeddings, MLMHead, Module, TransformerBlock


@dataclass
class ForwardTrace:
    embedding_output: Tensor
    hidden_states: list[Tensor] = field(default_factory=list)
    attention_maps: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None
    valid: np.ndarray | None = None

    @property
    def final_hidden(self) -> Tensor:
        return self.hidden_states[-1] if self.hidden_states else self.embedding_output


class Encoder(Module):
    config: ModelConfig
    adapters: list[AdapterPair] | None

    def layers(self) -> Iterator[tuple[TransformerBlock, AdapterPair | None]]:
        raise NotImplementedError

    @property
    def num_iterations(self) -> int:
        return self.config.num_layers

    @property
    def has_adapters(self) -> bool:
        return bool(self.adapters)

    def forward(
        self,
        tokens,
        valid: np.ndarray | None = None,
        token_types=None,
        train: bool = False,
        rng: np.random.Generator | None = None,
        with_logits: bool = True,
    ) -> ForwardTrace:
        tokens = np.asarray(tokens)
        if valid is None:
            valid = tokens != PAD_ID
        valid = np.asarray(valid, dtype=bool)
        x = self.embeddings(tokens, token_types, train, rng)
        trace = ForwardTrace(embedding_output=x, valid=valid)
        for block, adapters in self.layers():
            x, probs = block(x, valid, adapters, train, rng)
            trace.hidden_states.append(x)
            trace.attention_maps.append(probs)
        if with_logits:
            trace.logits = self.mlm_head(x, self.embeddings)
        return trace

    __call__ = forward

    def inject_adapters(self, bottleneck: int, rng: np.random.Generator, nonlinearity: str | None = None) -> None:
        """Add freshly initialised adapters (W_up = 0, so the model output is unchanged)."""
        if self.adapters:
            raise ConfigError("model already has adapters")
        self.config = self.config.replace(
            adapter_bottleneck=bottleneck,
            adapter_nonlinearity=nonlinearity or self.config.adapter_nonlinearity,
        )
        self.adapters = [AdapterPair(self.config, rng) for _ in range(self.num_iterations)]


class TeacherModel(Encoder):
    """Fully parameterised encoder: ``num_layers`` independent blocks.

    ``adapters`` is normally None; :func:`materialize_unrolled` produces teachers
    that carry explicit per-layer adapters.
    """

    kind = "teacher"

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None, with_adapters: bool | None = None):
        self.config = config
        self.embeddings = Embeddings(config, rng)
        self.blocks = [TransformerBlock(config, rng) for _ in range(config.num_layers)]
        if with_adapters is None:
            with_adapters = config.adapter_bottleneck > 0
        self.adapters = [AdapterPair(config, rng) for _ in range(config.num_layers)] if with_adapters else None
        self.mlm_head = MLMHead(config, rng)

    def layers(self):
        for i, block in enumerate(self.blocks):
            yield block, (self.adapters[i] if self.adapters else None)


class RecursiveStudent(Encoder):
    """One shared block applied ``num_layers`` times, optionally with per-iteration adapters."""

    kind = "student"

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.embeddings = Embeddings(config, rng)
        self.block = TransformerBlock(config, rng)
        self.adapters = (
            [AdapterPair(config, rng) for _ in range(config.num_layers)] if config.adapter_bottleneck else None
        )
        self.mlm_head = MLMHead(config, rng)

    def layers(self):
        for i in range(self.config.num_layers):
            yield self.block, (self.adapters[i] if self.adapters else None)


def embed(tokens, params: Embeddings, token_types=None, train=False, rng=None) -> Tensor:
    return params(tokens, token_types, train, rng)


def block_forward(x: Tensor, params: TransformerBlock, attn_mask, train=False, rng=None, adapters=None):
    return params(x, np.asarray(attn_mask, dtype=bool), adapters, train, rng)


def adapter_apply(x: Tensor, adapter) -> Tensor:
    return adapter(x)


def teacher_forward(tokens, mask, teacher: TeacherModel, **kwargs) -> ForwardTrace:
    return teacher.forward(tokens, mask, **kwargs)


def student_forward(tokens, mask, student: RecursiveStudent, **kwargs) -> ForwardTrace:
    return student.forward(tokens, mask, **kwargs)


def materialize_unrolled(student: RecursiveStudent) -> TeacherModel:
    """Untied copy of ``student``: L independent copies of the shared block."""
    unrolled = TeacherModel.__new__(TeacherModel)
    unrolled.config = student.config
    unrolled.embeddings = copy.deepcopy(student.embeddings)
    unrolled.blocks = [copy.deepcopy(student.block) for _ in range(student.num_iterations)]
    unrolled.adapters = copy.deepcopy(student.adapters) if student.adapters else None
    unrolled.mlm_head = copy.deepcopy(student.mlm_head)
    return unrolled


def count_parameters(model: Module, tunable_only: bool = False, include_mlm_head: bool = False) -> int:
    """Exact parameter count.

    The MLM head is a pre-training head that fine-tuning discards, so it is
    excluded unless ``include_mlm_head``. A shared block counts once.
    """
    total = 0
    for name, p in model.named_parameters():
        if not include_mlm_head and (name.startswith("mlm_head.") or ".mlm_head." in name):
            continue
        if tunable_only and not p.requires_grad:
            continue
        total += p.size
    return total


def parameter_breakdown(model: Module, include_mlm_head: bool = True) -> dict[str, tuple[int, int]]:
    """Per top-level module: (total, tunable)."""
    out: dict[str, list[int]] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        group = parts[0] if parts[0] != "encoder" else "encoder." + parts[1]
        if not include_mlm_head and "mlm_head" in parts:
            continue
        entry = out.setdefault(group, [0, 0])
        entry[0] += p.size
        entry[1] += p.size if p.requires_grad else 0
    return {k: (v[0], v[1]) for k, v in out.items()}
