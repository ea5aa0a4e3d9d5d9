"""Task heads, F1 metrics and evaluation reports."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import IGNORE, TaskDataset
from .model import ConfigError, Encoder, ForwardTrace, Linear, Module, count_parameters
from .numerics import Tensor, functional as F, no_grad

logger = logging.getLogger(__name__)

HEAD_KINDS = ("sequence_classification", "token_classification")


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    num_labels: int
    dropout_prob: float = 0.1
    label_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"head kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.num_labels < 2:
            raise ConfigError("a task head needs at least 2 labels")


class TaskHead(Module):
    def __init__(self, spec: HeadSpec, hidden_dim: int, rng=None, std: float = 0.02, dtype=np.float64):
        self.spec = spec
        self.projection = Linear(hidden_dim, spec.num_labels, rng, std, dtype)

    @property
    def kind(self) -> str:
        return self.spec.kind


def head_forward(trace: ForwardTrace, head: TaskHead, train: bool = False, rng=None) -> Tensor:
    """Sequence heads read the [CLS] position; token heads project every position."""
    h = trace.final_hidden
    if h.ndim != 3 or h.shape[-1] != head.projection.weight.shape[0]:
        raise ConfigError(f"hidden state shape {h.shape} does not fit head {head.projection.weight.shape}")
    if head.kind == "sequence_classification":
        h = h[:, 0, :]
    h = F.dropout(h, head.spec.dropout_prob, rng, train)
    return head.projection(h)


class TaskModel(Module):
    def __init__(self, encoder: Encoder, head: TaskHead):
        self.encoder = encoder
        self.head = head

    def forward(self, tokens, valid=None, train: bool = False, rng=None) -> Tensor:
        trace = self.encoder.forward(tokens, valid, train=train, rng=rng, with_logits=False)
        return head_forward(trace, self.head, train, rng)

    __call__ = forward


def task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over labelled positions (labels of -1 are ignored)."""
    labels = np.asarray(labels)
    target = np.zeros(logits.shape, dtype=logits.dtype)
    rows = np.nonzero(labels != IGNORE)
    target[rows + (labels[rows],)] = 1.0
    count = len(rows[0])
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype))
    return F.cross_entropy(logits, target).sum() * (1.0 / count)


# ---- metrics -------------------------------------------------------------


def bio_spans(tags: list[str]) -> set[tuple[str, int, int]]:
    """Exact (type, start, end) spans; a stray I-X is read as B-X."""
    spans, start, kind = set(), None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, label = tag.partition("-")
        continuing = prefix == "I" and start is not None and label == kind
        if start is not None and not continuing:
            spans.add((kind, start, i))
            start = kind = None
        if prefix == "B" or (prefix == "I" and not continuing):
            if prefix == "I":
                logger.info("repairing stray %s at position %d", tag, i)
            start, kind = i, label
    return spans


def _prf(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def _as_sentences(seq) -> list[list[str]]:
    seq = list(seq)
    if seq and isinstance(seq[0], str):
        return [seq]
    return [list(s) for s in seq]


def f1_score(predictions, gold, scheme: str = "entity_span") -> float:
    """F1 over BIO tag sequences.

    ``entity_span`` counts exact span matches; ``token_micro`` counts tokens
    whose gold or predicted tag is not ``O``. Identical inputs give 1.0, even
    when neither side has entities.
    """
    pred_s, gold_s = _as_sentences(predictions), _as_sentences(gold)
    if len(pred_s) != len(gold_s) or any(len(p) != len(g) for p, g in zip(pred_s, gold_s)):
        raise ValueError("predictions and gold must have equal lengths")
    tp = fp = fn = 0
    if scheme == "entity_span":
        for i, (p, g) in enumerate(zip(pred_s, gold_s)):
            ps = {(i,) + s for s in bio_spans(p)}
            gs = {(i,) + s for s in bio_spans(g)}
            tp += len(ps & gs)
            fp += len(ps - gs)
            fn += len(gs - ps)
    elif scheme == "token_micro":
        for p, g in zip(pred_s, gold_s):
            for a, b in zip(p, g):
                if a == b and b != "O":
                    tp += 1
                else:
                    fp += a != "O" and a != b
                    fn += b != "O" and a != b
    else:
        raise ValueError(f"unknown F1 scheme {scheme!r}")
    return _prf(tp, fp, fn)


def class_counts(pred: np.ndarray, gold: np.ndarray, num_labels: int) -> list[dict[str, int]]:
    out = []
    for c in range(num_labels):
        tp = int(((pred == c) & (gold == c)).sum())
        out.append(
            dict(tp=tp, fp=int(((pred == c) & (gold != c)).sum()), fn=int(((pred != c) & (gold == c)).sum()), support=int((gold == c).sum()))
        )
    return out


@dataclass
class EvalReport:
    """For token tasks ``accuracy`` is token-level and ``micro_f1`` is exact-span F1."""

    kind: str
    accuracy: float
    macro_f1: float
    micro_f1: float
    per_class: dict[str, dict[str, int]]
    n_examples: int
    params_total: int
    params_tunable: int
    ms_per_step: float = field(default=0.0, compare=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key in ("kind", "accuracy", "macro_f1", "micro_f1", "n_examples", "params_total", "params_tunable", "ms_per_step"):
            w.writerow([key, getattr(self, key)])
        for label, counts in self.per_class.items():
            for key, value in counts.items():
                w.writerow([f"class[{label}].{key}", value])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        values, per_class = {}, {}
        for key, value in rows:
            if key.startswith("class["):
                label, stat = key[6:].split("].")
                per_class.setdefault(label, {})[stat] = int(value)
            else:
                values[key] = value
        return cls(
            kind=values["kind"],
            accuracy=float(values["accuracy"]),
            macro_f1=float(values["macro_f1"]),
            micro_f1=float(values["micro_f1"]),
            per_class=per_class,
            n_examples=int(values["n_examples"]),
            params_total=int(values["params_total"]),
            params_tunable=int(values["params_tunable"]),
            ms_per_step=float(values["ms_per_step"]),
        )

    def pretty(self) -> str:
        lines = [
            f"task:            {self.kind}",
            f"examples:        {self.n_examples}",
            f"accuracy:        {self.accuracy:.4f}",
            f"macro F1:        {self.macro_f1:.4f}",
            f"micro F1:        {self.micro_f1:.4f}",
            f"params total:    {self.params_total:,}",
            f"params tunable:  {self.params_tunable:,}",
            f"ms / step:       {self.ms_per_step:.2f}",
            "per class (tp fp fn support):",
        ]
        for label, c in self.per_class.items():
            lines.append(f"  {label:<12} {c['tp']:>6} {c['fp']:>6} {c['fn']:>6} {c['support']:>6}")
        return "\n".join(lines)


def predict(model: TaskModel, dataset: TaskDataset, batch_size: int = 32) -> tuple[np.ndarray, float]:
    preds, elapsed, steps = [], 0.0, 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            t0 = time.perf_counter()
            logits = model(dataset.tokens[start : start + batch_size])
            preds.append(logits.data.argmax(axis=-1))
            elapsed += time.perf_counter() - t0
            steps += 1
    return np.concatenate(preds), 1000.0 * elapsed / max(steps, 1)


def evaluate(model: TaskModel, dataset: TaskDataset, batch_size: int = 32) -> EvalReport:
    """Single deterministic pass (dropout off)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if model.head.kind != dataset.kind or model.head.spec.num_labels != dataset.num_labels:
        raise ConfigError(
            f"head ({model.head.kind}, {model.head.spec.num_labels} labels) does not match dataset "
            f"({dataset.kind}, {dataset.num_labels} labels)"
        )
    pred, ms = predict(model, dataset, batch_size)
    names = dataset.label_names
    if dataset.kind == "sequence_classification":
        gold, flat_pred = dataset.labels, pred
    else:
        keep = dataset.labels != IGNORE
        gold, flat_pred = dataset.labels[keep], pred[keep]
    counts = class_counts(flat_pred, gold, len(names))
    accuracy = float((flat_pred == gold).mean())
    macro = float(np.mean([_prf(c["tp"], c["fp"], c["fn"]) for c in counts]))
    if dataset.kind == "sequence_classification":
        micro = _prf(sum(c["tp"] for c in counts), sum(c["fp"] for c in counts), sum(c["fn"] for c in counts))
    else:
        pred_tags, gold_tags = [], []
        for row_pred, row_gold in zip(pred, dataset.labels):
            keep = row_gold != IGNORE
            pred_tags.append([names[i] for i in row_pred[keep]])
            gold_tags.append([names[i] for i in row_gold[keep]])
        micro = f1_score(pred_tags, gold_tags, "entity_span")
    return EvalReport(
        kind=dataset.kind,
        accuracy=accuracy,
        macro_f1=macro,
        micro_f1=float(micro),
        per_class={name: c for name, c in zip(names, counts)},
        n_examples=len(dataset),
        params_total=count_parameters(model),
        params_tunable=count_parameters(model, tunable_only=True),
        ms_per_step=ms,
    )
