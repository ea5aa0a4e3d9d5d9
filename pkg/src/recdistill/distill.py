"""Layer-to-layer distillation losses for a recursive student.

All attention/hidden terms average over non-padding query positions. MLM and
output terms are normalised by the number of masked positions unless
``raw_sums`` is set, in which case they are plain sums over positions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, ForwardTrace
from .numerics import Tensor, functional as F

logger = logging.getLogger(__name__)

ALIGNMENT_MODES = ("full", "hidden_only", "attention_only", "none")
_MODE_ALIASES = {"hidden": "hidden_only", "attention": "attention_only"}


@dataclass(frozen=True)
class LayerMap:
    student_iterations: int
    teacher_layers: int
    mapping: tuple[int, ...]

    def __post_init__(self):
        m = self.mapping
        if len(m) != self.student_iterations:
            raise ConfigError(f"layer map has {len(m)} entries for {self.student_iterations} iterations")
        if any(not 1 <= t <= self.teacher_layers for t in m):
            raise ConfigError(f"layer map entries must lie in [1, {self.teacher_layers}]: {m}")
        if any(b <= a for a, b in zip(m, m[1:])):
            raise ConfigError(f"layer map must be strictly increasing: {m}")

    def __call__(self, iteration: int) -> int:
        """Teacher layer (1-based) aligned with student iteration (1-based)."""
        return self.mapping[iteration - 1]


def build_layer_map(student_iterations: int, teacher_layers: int, strategy: str = "identity") -> LayerMap:
    if student_iterations > teacher_layers:
        raise ConfigError(f"student iterations {student_iterations} exceed teacher layers {teacher_layers}")
    if strategy == "identity":
        if student_iterations != teacher_layers:
            raise ConfigError("identity layer map needs as many student iterations as teacher layers")
        mapping = tuple(range(1, teacher_layers + 1))
    elif strategy == "uniform_stride":
        mapping = tuple(math.ceil(l * teacher_layers / student_iterations) for l in range(1, student_iterations + 1))
    else:
        raise ConfigError(f"unknown layer map strategy {strategy!r}")
    return LayerMap(student_iterations, teacher_layers, mapping)


@dataclass(frozen=True)
class LossWeights:
    lambda_mlm: float = 1.0
    lambda_align: float = 3.0
    lambda_out: float = 5.0
    alignment_mode: str = "full"
    embed_loss_enabled: bool = False
    lambda_embed: float = 1.0
    raw_sums: bool = False
    align_mean: bool = False
    # KL(student || teacher) as written; True swaps to KL(teacher || student).
    teacher_first: bool = False

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.alignment_mode, self.alignment_mode)
        if mode not in ALIGNMENT_MODES:
            raise ConfigError(f"alignment_mode must be one of {ALIGNMENT_MODES}, got {self.alignment_mode!r}")
        object.__setattr__(self, "alignment_mode", mode)
        for name in ("lambda_mlm", "lambda_align", "lambda_out", "lambda_embed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    mlm: float
    att: float
    hidden: float
    align: float
    out: float
    embed: float
    total: float
    per_layer: list[tuple[float, float]] = field(default_factory=list)
    loss: Tensor | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("mlm", "att", "hidden", "align", "out", "embed", "total")}

    def log_line(self, step: int) -> str:
        return f"step={step} " + " ".join(f"{k}={v:.10g}" for k, v in self.as_row().items())


def _zero(dtype=np.float64) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def _one_hot(labels: np.ndarray, vocab: int, dtype) -> np.ndarray:
    out = np.zeros(labels.shape + (vocab,), dtype=dtype)
    rows = np.nonzero(labels >= 0)
    out[rows + (labels[rows],)] = 1.0
    return out


def mlm_loss(logits: Tensor, labels, raw_sums: bool = False) -> Tensor:
    """Cross-entropy at masked positions.

    ``labels`` is either integer ids with -1 at unmasked positions, or one-hot
    rows (zero rows for unmasked positions).
    """
    labels = np.asarray(labels)
    if labels.shape == logits.shape:
        target = labels.astype(logits.dtype)
    elif labels.shape == logits.shape[:-1]:
        target = _one_hot(labels, logits.shape[-1], logits.dtype)
    else:
        raise ConfigError(f"label shape {labels.shape} does not fit logits {logits.shape}")
    count = int(target.sum())
    if count == 0:
        logger.warning("mlm_loss: no masked positions in batch")
        return _zero(logits.dtype)
    total = F.cross_entropy(logits, target).sum()
    return total if raw_sums else total * (1.0 / count)


def attention_alignment_loss(
    student_map: Tensor, teacher_map: Tensor, valid: np.ndarray | None = None, teacher_first: bool = False
) -> Tensor:
    """Mean over heads and valid query rows of KL(student row || teacher row).

    Maps are ``batch x H x N x N`` (or ``H x N x N`` for a single sequence).
    """
    if student_map.ndim == 3:
        student_map = student_map.reshape((1,) + student_map.shape)
        teacher_map = teacher_map.reshape((1,) + teacher_map.shape) if isinstance(teacher_map, Tensor) else np.asarray(teacher_map)[None]
    t_shape = teacher_map.shape
    if student_map.shape[1] != t_shape[1]:
        raise ConfigError(f"head count mismatch: student {student_map.shape[1]} vs teacher {t_shape[1]}")
    if student_map.shape != t_shape:
        raise ConfigError(f"attention map shape mismatch {student_map.shape} vs {t_shape}")
    B, H, N, _ = student_map.shape
    valid = np.ones((B, N), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    p, q = (teacher_map, student_map) if teacher_first else (student_map, teacher_map)
    rows = F.kl_divergence(p, q)  # B x H x N
    rows = F.where_mask(rows, valid[:, None, :])
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _zero(student_map.dtype)
    return rows.sum() * (1.0 / (H * n_valid))


def hidden_alignment_loss(student_hidden: Tensor, teacher_hidden: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Mean over valid positions of 1 - cos(student, teacher)."""
    if student_hidden.shape != teacher_hidden.shape:
        raise ConfigError(f"hidden shape mismatch {student_hidden.shape} vs {teacher_hidden.shape}")
    lead = student_hidden.shape[:-1]
    valid = np.ones(lead, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return _zero(student_hidden.dtype)
    dist = 1.0 - F.cosine_similarity(student_hidden, teacher_hidden)
    return F.where_mask(dist, valid).sum() * (1.0 / n_valid)


embedding_loss = hidden_alignment_loss


def alignment_loss(
    trace_s: ForwardTrace,
    trace_t: ForwardTrace,
    layer_map: LayerMap,
    mode: str = "full",
    teacher_first: bool = False,
) -> tuple[Tensor, list[tuple[float, float]]]:
    """Sum over student iterations of attention + hidden alignment to mapped teacher layers.

    Returns the summed loss and a per-iteration ``(att, hidden)`` breakdown.
    """
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in ALIGNMENT_MODES:
        raise ConfigError(f"unknown alignment mode {mode!r}")
    dtype = trace_s.embedding_output.dtype
    if mode == "none":
        return _zero(dtype), []
    if len(trace_s.hidden_states) != layer_map.student_iterations:
        raise ConfigError("student trace length does not match the layer map")
    if len(trace_t.hidden_states) < layer_map.teacher_layers:
        raise ConfigError("teacher trace is shorter than the layer map requires")
    valid = trace_s.valid
    total = _zero(dtype)
    breakdown = []
    for l in range(1, layer_map.student_iterations + 1):
        t = layer_map(l) - 1
        att = hid = None
        if mode in ("full", "attention_only"):
            att = attention_alignment_loss(
                trace_s.attention_maps[l - 1], trace_t.attention_maps[t], valid, teacher_first
            )
            total = total + att
        if mode in ("full", "hidden_only"):
            hid = hidden_alignment_loss(trace_s.hidden_states[l - 1], trace_t.hidden_states[t], valid)
            total = total + hid
        breakdown.append((0.0 if att is None else att.item(), 0.0 if hid is None else hid.item()))
    return total, breakdown


def output_loss(student_logits: Tensor, teacher_logits, mask_indicator, raw_sums: bool = False, teacher_first: bool = False) -> Tensor:
    """KL(student || teacher) over output distributions at masked positions."""
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_logits.shape != student_logits.shape:
        raise ConfigError(f"logit shape mismatch {student_logits.shape} vs {t_logits.shape}")
    w = np.asarray(mask_indicator, dtype=bool)
    count = int(w.sum())
    if count == 0:
        logger.warning("output_loss: no masked positions in batch")
        return _zero(student_logits.dtype)
    p_s = F.softmax(student_logits, axis=-1)
    p_t = F.softmax(Tensor(t_logits), axis=-1)
    rows = F.kl_divergence(p_t, p_s) if teacher_first else F.kl_divergence(p_s, p_t)
    total = F.where_mask(rows, w).sum()
    return total if raw_sums else total * (1.0 / count)


def total_loss(batch, trace_s: ForwardTrace, trace_t: ForwardTrace, weights: LossWeights, layer_map: LayerMap) -> LossReport:
    """Weighted sum of MLM, alignment and output terms (+ embedding term when enabled).

    ``trace_t`` must come from a frozen teacher (no recorded gradients).
    """
    dtype = trace_s.embedding_output.dtype
    mlm = mlm_loss(trace_s.logits, batch.y, weights.raw_sums)
    align, per_layer = alignment_loss(trace_s, trace_t, layer_map, weights.alignment_mode, weights.teacher_first)
    if weights.align_mean and per_layer:
        align = align * (1.0 / len(per_layer))
    out = output_loss(trace_s.logits, trace_t.logits, batch.w, weights.raw_sums, weights.teacher_first)
    loss = mlm * weights.lambda_mlm + out * weights.lambda_out
    if weights.alignment_mode != "none":
        loss = loss + align * weights.lambda_align
    embed = _zero(dtype)
    if weights.embed_loss_enabled:
        embed = embedding_loss(trace_s.embedding_output, trace_t.embedding_output, trace_s.valid)
        loss = loss + embed * weights.lambda_embed
    return LossReport(
        mlm=mlm.item(),
        att=sum(a for a, _ in per_layer),
        hidden=sum(h for _, h in per_layer),
        align=align.item(),
        out=out.item(),
        embed=embed.item(),
        total=loss.item(),
        per_layer=per_layer,
        loss=loss,
    )
