"""Synthetic desk-scale corpus and downstream tasks.

The corpus is generated from a small grammar in which word classes occupy
distinct contexts (colours follow "painted", moods follow "feels", ...), so a
masked-LM can learn useful structure in a few hundred steps. The tasks reuse
the same lexicon:

* classification: does the sentence mention a colour (keyword) or only
  other adjectives (distractors)?
* tagging: BIO spans over animal mentions, optionally preceded by a colour.
"""

from __future__ import annotations

from pathlib import Path

from .rng import derive_rng

COLOURS = ["red", "blue", "green", "yellow", "purple", "orange", "white", "black"]
MOODS = ["happy", "sad", "angry", "calm", "tired", "proud"]
SIZES = ["big", "small", "tiny", "huge", "tall", "short"]
ANIMALS = ["cat", "dog", "bird", "fish", "horse", "mouse", "fox", "cow"]
OBJECTS = ["box", "ball", "car", "book", "cup", "lamp", "chair", "door"]
VERBS = ["sees", "likes", "chases", "finds", "holds", "wants", "follows", "watches"]
PLACES = ["in the park", "near the river", "under the table", "at home", "on the hill", "by the road"]
NUMBERS = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]


def _sentence(rng, nouns) -> str:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]  # noqa: E731
    kind = int(rng.integers(6))
    if kind == 0:
        return f"the {pick(nouns)} is painted {pick(COLOURS)} ."
    if kind == 1:
        return f"the {pick(ANIMALS)} feels {pick(MOODS)} today ."
    if kind == 2:
        return f"the {pick(SIZES)} {pick(ANIMALS)} {pick(VERBS)} the {pick(SIZES)} {pick(OBJECTS)} {pick(PLACES)} ."
    if kind == 3:
        start = int(rng.integers(len(NUMBERS) - 3))
        return "we count " + " ".join(NUMBERS[start : start + 4]) + " ."
    if kind == 4:
        return f"a {pick(COLOURS)} {pick(OBJECTS)} is {pick(PLACES)} ."
    return f"the {pick(ANIMALS)} {pick(VERBS)} a {pick(COLOURS)} {pick(OBJECTS)} ."


def toy_corpus(n_docs: int = 200, seed: int = 0, sentences: tuple[int, int] = (3, 8)) -> list[str]:
    """Documents (one string each) of a few grammar sentences sharing a topic."""
    rng = derive_rng(seed, "toy-corpus")
    docs = []
    for _ in range(n_docs):
        nouns = list(rng.choice(ANIMALS + OBJECTS, size=4, replace=False))
        k = int(rng.integers(sentences[0], sentences[1] + 1))
        docs.append(" ".join(_sentence(rng, nouns) for _ in range(k)))
    return docs


def toy_classification(n: int = 400, seed: int = 0) -> list[tuple[str, str]]:
    """Balanced ``(text, label)`` rows; label ``keyword`` iff a colour appears."""
    rng = derive_rng(seed, "toy-cls")
    rows = []
    for i in range(n):
        positive = i % 2 == 0
        adj = COLOURS if positive else MOODS + SIZES
        a = adj[int(rng.integers(len(adj)))]
        d = (MOODS + SIZES)[int(rng.integers(len(MOODS) + len(SIZES)))]
        noun = (ANIMALS + OBJECTS)[int(rng.integers(16))]
        verb = VERBS[int(rng.integers(len(VERBS)))]
        place = PLACES[int(rng.integers(len(PLACES)))]
        other = OBJECTS[int(rng.integers(len(OBJECTS)))]
        if rng.random() < 0.5:
            text = f"the {d} {noun} {verb} the {a} {other} {place} ."
        else:
            text = f"the {a} {noun} {verb} the {d} {other} {place} ."
        rows.append((text, "keyword" if positive else "other"))
    order = rng.permutation(n)
    return [rows[i] for i in order]


def toy_tagging(n: int = 300, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """CoNLL-style sentences with ``B-ANIMAL``/``I-ANIMAL`` spans."""
    rng = derive_rng(seed, "toy-tag")
    out = []
    for _ in range(n):
        words, tags = ["the"], ["O"]
        if rng.random() < 0.5:
            words += [COLOURS[int(rng.integers(len(COLOURS)))], ANIMALS[int(rng.integers(len(ANIMALS)))]]
            tags += ["B-ANIMAL", "I-ANIMAL"]
        else:
            words += [SIZES[int(rng.integers(len(SIZES)))], ANIMALS[int(rng.integers(len(ANIMALS)))]]
            tags += ["O", "B-ANIMAL"]
        words += [VERBS[int(rng.integers(len(VERBS)))], "the"]
        tags += ["O", "O"]
        if rng.random() < 0.5:
            words.append(ANIMALS[int(rng.integers(len(ANIMALS)))])
            tags.append("B-ANIMAL")
        else:
            words.append(OBJECTS[int(rng.integers(len(OBJECTS)))])
            tags.append("O")
        words.append(".")
        tags.append("O")
        out.append((words, tags))
    return out


def write_classification(path, rows) -> None:
    Path(path).write_text("".join(f"{t}\t{l}\n" for t, l in rows), encoding="utf-8")


def write_conll(path, sentences) -> None:
    blocks = ["".join(f"{w} {t}\n" for w, t in zip(words, tags)) for words, tags in sentences]
    Path(path).write_text("\n".join(blocks), encoding="utf-8")


def write_corpus(path, docs) -> None:
    Path(path).write_text("".join(d + "\n" for d in docs), encoding="utf-8")
