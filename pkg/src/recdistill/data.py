"""Corpus ingestion, vocabulary, sliding windows and MLM masking."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .model.config import PAD_ID
from .rng import derive_rng

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)
IGNORE = -1

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str, mode: str = "word") -> list[str]:
    if mode == "word":
        return _WORD_RE.findall(text.lower())
    if mode == "char":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


class Vocabulary:
    def __init__(self, tokens: Sequence[str], mode: str = "word"):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.mode = mode
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    pad_id = property(lambda self: self._index[PAD])
    unk_id = property(lambda self: self._index[UNK])
    cls_id = property(lambda self: self._index[CLS])
    sep_id = property(lambda self: self._index[SEP])
    mask_id = property(lambda self: self._index[MASK])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.cls_id, self.sep_id))

    def encode(self, text: str) -> list[int]:
        return [self.id(t) for t in tokenize(text, self.mode)]

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t.lower() if self.mode == "word" else t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path, mode: str = "word") -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines(), mode)


def build_vocab(corpus: Iterable[str], size: int, mode: str = "word") -> Vocabulary:
    """Frequency-ranked vocabulary (ties broken alphabetically) capped at ``size`` entries."""
    if size < len(RESERVED) + 1:
        raise ValueError(f"vocabulary size must be at least {len(RESERVED) + 1}")
    counts: Counter[str] = Counter()
    empty = True
    for doc in corpus:
        empty = False
        counts.update(tokenize(doc, mode))
    if empty:
        raise ValueError("corpus is empty")
    for tok in RESERVED:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [t for t, _ in ranked[: size - len(RESERVED)]], mode)


def read_corpus(path) -> list[str]:
    """One document per line; blank lines are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line.strip()]


def window_corpus(
    documents: Iterable[Sequence[int]],
    window: int,
    stride: int,
    max_per_doc: int,
    cls_id: int = 2,
    sep_id: int = 3,
    pad_id: int = PAD_ID,
) -> list[list[int]]:
    """Overlapping windows of each tokenised document, framed by [CLS] ... [SEP].

    Windows start at 0, stride, 2*stride, ... and stop once a window reaches the
    end of the document or ``max_per_doc`` windows were emitted. Every output
    has length ``window + 2``; short windows are padded.
    """
    if not window > stride > 0:
        raise ValueError("need window > stride > 0")
    out = []
    for doc in documents:
        doc = list(doc)
        if not doc:
            continue
        start = 0
        for _ in range(max_per_doc):
            chunk = doc[start : start + window]
            seq = [cls_id] + chunk + [sep_id]
            out.append(seq + [pad_id] * (window + 2 - len(seq)))
            if start + window >= len(doc):
                break
            start += stride
    return out


@dataclass
class MaskedRow:
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    valid: np.ndarray


@dataclass
class DistillBatch:
    """Token ids ``x``, original ids ``y`` (-1 where unmasked), mask indicator ``w``,
    and attention validity (non-padding); all are ``batch x seq``."""

    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    valid: np.ndarray

    @classmethod
    def collate(cls, rows: Sequence[MaskedRow]) -> "DistillBatch":
        return cls(*(np.stack([getattr(r, k) for r in rows]) for k in ("x", "y", "w", "valid")))

    def __len__(self) -> int:
        return self.x.shape[0]


def apply_mlm_masking(
    sequence: Sequence[int],
    vocab: Vocabulary,
    p_mask: float,
    seed: int,
    index: int = 0,
    split: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> MaskedRow:
    """Select each non-special position with probability ``p_mask``; selected positions
    become [MASK] / a random token / unchanged according to ``split``.

    Deterministic in ``(seed, index)``.
    """
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError("p_mask must be in [0, 1]")
    if abs(sum(split) - 1.0) > 1e-9 or min(split) < 0:
        raise ValueError("split must be three nonnegative fractions summing to 1")
    rng = derive_rng(seed, "mask", index)
    x = np.asarray(sequence, dtype=np.int64).copy()
    n = x.size
    candidate = ~np.isin(x, list(vocab.special_ids))
    chosen = candidate & (rng.random(n) < p_mask)
    action = rng.random(n)
    replacement = rng.integers(len(RESERVED), max(len(vocab), len(RESERVED) + 1), size=n)
    y = np.where(chosen, x, IGNORE)
    to_mask = chosen & (action < split[0])
    to_random = chosen & (action >= split[0]) & (action < split[0] + split[1])
    x[to_mask] = vocab.mask_id
    x[to_random] = replacement[to_random]
    valid = np.asarray(sequence) != vocab.pad_id
    return MaskedRow(x=x, y=y, w=chosen.astype(np.int64), valid=valid)


class BatchStream:
    """Endless, deterministic stream of masked batches over a fixed set of sequences.

    Order is reshuffled every epoch from ``(seed, "order", epoch)``; each drawn
    sequence is masked with its own counter so epochs see fresh masks.
    """

    def __init__(
        self,
        sequences: Sequence[Sequence[int]],
        vocab: Vocabulary,
        batch_size: int,
        p_mask: float = 0.15,
        seed: int = 0,
        split: tuple[float, float, float] = (0.8, 0.1, 0.1),
    ):
        if not sequences:
            raise ValueError("no training sequences")
        self.sequences = [np.asarray(s, dtype=np.int64) for s in sequences]
        self.vocab = vocab
        self.batch_size = batch_size
        self.p_mask = p_mask
        self.seed = seed
        self.split = split
        self._drawn = 0
        self._epoch = -1
        self._order = None

    def __iter__(self) -> Iterator[DistillBatch]:
        while True:
            yield self.next_batch()

    def next_batch(self) -> DistillBatch:
        n = len(self.sequences)
        rows = []
        for _ in range(self.batch_size):
            epoch, pos = divmod(self._drawn, n)
            if epoch != self._epoch:
                self._epoch, self._order = epoch, derive_rng(self.seed, "order", epoch).permutation(n)
            idx = int(self._order[pos])
            rows.append(apply_mlm_masking(self.sequences[idx], self.vocab, self.p_mask, self.seed, self._drawn, self.split))
            self._drawn += 1
        return DistillBatch.collate(rows)


def prepare_sequences(documents: Sequence[str], vocab: Vocabulary, window: int, stride: int, max_per_doc: int) -> list[list[int]]:
    encoded = [vocab.encode(doc) for doc in documents]
    return window_corpus(encoded, window, stride, max_per_doc, vocab.cls_id, vocab.sep_id, vocab.pad_id)


# ---- task datasets ---------------------------------------------------------


@dataclass
class TaskDataset:
    """Encoded supervised examples; ``labels`` is per-example (sequence kind) or per-token
    with -1 on [CLS]/[SEP]/padding (token kind)."""

    kind: str
    tokens: np.ndarray
    labels: np.ndarray
    label_names: list[str]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.kind, self.tokens[idx], self.labels[idx], self.label_names)


def read_classification_tsv(path) -> list[tuple[str, str]]:
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{n}: expected text<TAB>label")
        text, label = line.rsplit("\t", 1)
        rows.append((text, label.strip()))
    return rows


def read_conll(path) -> list[tuple[list[str], list[str]]]:
    sentences, tokens, tags = [], [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            if tokens:
                sentences.append((tokens, tags))
                tokens, tags = [], []
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ValueError(f"{path}:{n}: expected 'token tag'")
        tokens.append(parts[0])
        tags.append(parts[-1])
    if tokens:
        sentences.append((tokens, tags))
    return sentences


def encode_classification(rows, vocab: Vocabulary, max_len: int, label_names: list[str] | None = None) -> TaskDataset:
    label_names = label_names or sorted({label for _, label in rows})
    index = {name: i for i, name in enumerate(label_names)}
    unknown = {label for _, label in rows} - index.keys()
    if unknown:
        raise ValueError(f"labels {sorted(unknown)} are not in the label space {label_names}")
    tokens = np.full((len(rows), max_len), vocab.pad_id, dtype=np.int64)
    labels = np.zeros(len(rows), dtype=np.int64)
    for i, (text, label) in enumerate(rows):
        ids = [vocab.cls_id] + vocab.encode(text)[: max_len - 2] + [vocab.sep_id]
        tokens[i, : len(ids)] = ids
        labels[i] = index[label]
    return TaskDataset("sequence_classification", tokens, labels, label_names)


def encode_tagging(sentences, vocab: Vocabulary, max_len: int, label_names: list[str] | None = None) -> TaskDataset:
    label_names = label_names or sorted({t for _, tags in sentences for t in tags}, key=lambda t: (t != "O", t))
    index = {name: i for i, name in enumerate(label_names)}
    unknown = {t for _, tags in sentences for t in tags} - index.keys()
    if unknown:
        raise ValueError(f"tags {sorted(unknown)} are not in the label space {label_names}")
    tokens = np.full((len(sentences), max_len), vocab.pad_id, dtype=np.int64)
    labels = np.full((len(sentences), max_len), IGNORE, dtype=np.int64)
    for i, (words, tags) in enumerate(sentences):
        words, tags = words[: max_len - 2], tags[: max_len - 2]
        ids = [vocab.cls_id] + vocab.encode_tokens(words) + [vocab.sep_id]
        tokens[i, : len(ids)] = ids
        labels[i, 1 : 1 + len(tags)] = [index[t] for t in tags]
    return TaskDataset("token_classification", tokens, labels, label_names)


def load_task(path, kind: str, vocab: Vocabulary, max_len: int, label_names: list[str] | None = None) -> TaskDataset:
    if kind == "sequence_classification":
        return encode_classification(read_classification_tsv(path), vocab, max_len, label_names)
    if kind == "token_classification":
        return encode_tagging(read_conll(path), vocab, max_len, label_names)
    raise ValueError(f"unknown task kind {kind!r}")
