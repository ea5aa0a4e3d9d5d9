import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recdistill.checkpoint import load_batch_cache, save_batch_cache
from recdistill.data import (
    IGNORE,
    RESERVED,
    BatchStream,
    DistillBatch,
    Vocabulary,
    apply_mlm_masking,
    build_vocab,
    encode_classification,
    encode_tagging,
    load_task,
    read_conll,
    tokenize,
    window_corpus,
)


def test_vocab_word_example():
    v = build_vocab(["a a b"], 7, "word")
    assert v.tokens == list(RESERVED) + ["a", "b"]
    assert v.encode("a b c") == [5, 6, v.unk_id]


def test_vocab_char_bound():
    text = "Hello, world! abc"
    v = build_vocab([text], 1000, "char")
    assert len(v) <= 5 + len(set(text.replace(" ", "")))


def test_vocab_deterministic_file(tmp_path):
    corpus = ["the cat sat", "the dog sat on the mat"]
    build_vocab(corpus, 20).save(tmp_path / "a.txt")
    build_vocab(corpus, 20).save(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert Vocabulary.load(tmp_path / "a.txt") == build_vocab(corpus, 20)


def test_vocab_errors():
    with pytest.raises(ValueError):
        build_vocab(["a"], 5)
    with pytest.raises(ValueError):
        build_vocab([], 10)
    with pytest.raises(ValueError):
        Vocabulary(["a", "b"])


def test_vocab_frequency_then_alpha():
    v = build_vocab(["b a c c b"], 20)
    assert v.tokens[5:] == ["b", "c", "a"]


def test_tokenize_modes():
    assert tokenize("The cat, sat.") == ["the", "cat", ",", "sat", "."]
    assert tokenize("ab c", "char") == ["a", "b", "c"]


# ---- windows ---------------------------------------------------------------------

def test_window_exact_fit():
    out = window_corpus([list(range(10, 266))], 256, 128, 10)
    assert len(out) == 1 and len(out[0]) == 258
    assert out[0][0] == 2 and out[0][-1] == 3


def test_window_cap_binds():
    doc = list(range(10 * 128 + 256))
    assert len(window_corpus([doc], 256, 128, 10)) == 10
    assert len(window_corpus([doc], 256, 128, 100)) == 11


def test_window_short_doc_padded():
    out = window_corpus([[7, 8, 9]], 8, 4, 10)
    assert out == [[2, 7, 8, 9, 3, 0, 0, 0, 0, 0]]


def test_window_bad_args():
    with pytest.raises(ValueError):
        window_corpus([[1]], 4, 4, 10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(2, 20).flatmap(lambda w: st.tuples(st.just(w), st.integers(1, w - 1))), st.integers(1, 12))
def test_window_properties(n, ws, cap):
    window, stride = ws
    doc = list(range(100, 100 + n))
    out = window_corpus([doc], window, stride, cap)
    assert 1 <= len(out) <= cap
    bodies = [[t for t in seq[1:] if t >= 100] for seq in out]
    for a, b in zip(bodies, bodies[1:]):
        assert a[stride:] == b[: window - stride]
    if len(out) < cap:
        assert bodies[-1][-1] == doc[-1]


# ---- masking ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def vocab():
    return Vocabulary(list(RESERVED) + [f"w{i}" for i in range(95)])


def _seq(n, rng):
    body = list(rng.integers(5, 100, size=n - 2))
    return [2] + body + [3]


def test_mask_p0(vocab):
    seq = _seq(20, np.random.default_rng(0))
    row = apply_mlm_masking(seq, vocab, 0.0, seed=1)
    assert not row.w.any() and list(row.x) == seq and np.all(row.y == IGNORE)


def test_mask_p1_all_mask_mode(vocab):
    seq = _seq(20, np.random.default_rng(0)) + [0, 0]
    row = apply_mlm_masking(seq, vocab, 1.0, seed=1, split=(1.0, 0.0, 0.0))
    body = slice(1, 19)
    assert np.all(row.x[body] == vocab.mask_id) and np.all(row.w[body] == 1)
    assert list(row.x[[0, 19, 20, 21]]) == [2, 3, 0, 0]
    assert not row.w[[0, 19, 20, 21]].any()


def test_mask_fraction_and_specials(vocab):
    rng = np.random.default_rng(0)
    masked = total = 0
    for i in range(1000):
        seq = _seq(102, rng) + [0] * 3
        row = apply_mlm_masking(seq, vocab, 0.15, seed=3, index=i)
        s = np.asarray(seq)
        special = np.isin(s, [0, 2, 3])
        assert not row.w[special].any()
        assert np.array_equal(row.x[special], s[special])
        assert np.array_equal(row.w == 1, row.y != IGNORE)
        assert np.array_equal(row.y[row.w == 1], s[row.w == 1])
        masked += int(row.w.sum())
        total += int((~special).sum())
    assert total == 100_000
    assert 0.14 <= masked / total <= 0.16


def test_mask_split_proportions(vocab):
    rng = np.random.default_rng(1)
    counts = np.zeros(3)
    for i in range(400):
        seq = _seq(102, rng)
        row = apply_mlm_masking(seq, vocab, 0.5, seed=0, index=i)
        sel = row.w == 1
        x, y = row.x[sel], row.y[sel]
        counts += [(x == vocab.mask_id).sum(), ((x != vocab.mask_id) & (x != y)).sum(), (x == y).sum()]
    frac = counts / counts.sum()
    # "unchanged" includes random draws that hit the original token (~1/95 of 10%)
    assert abs(frac[0] - 0.8) < 0.01 and abs(frac[1] - 0.1) < 0.01 and abs(frac[2] - 0.1) < 0.01


def test_mask_deterministic(vocab):
    seq = _seq(40, np.random.default_rng(0))
    a = apply_mlm_masking(seq, vocab, 0.15, seed=5, index=3)
    b = apply_mlm_masking(seq, vocab, 0.15, seed=5, index=3)
    c = apply_mlm_masking(seq, vocab, 0.15, seed=5, index=4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.w, b.w)
    assert not np.array_equal(a.w, c.w)


def test_batch_stream_deterministic_and_cache(vocab, tmp_path):
    rng = np.random.default_rng(0)
    seqs = [_seq(12, rng) for _ in range(7)]
    s1, s2 = BatchStream(seqs, vocab, 4, seed=9), BatchStream(seqs, vocab, 4, seed=9)
    b1 = [s1.next_batch() for _ in range(5)]
    b2 = [s2.next_batch() for _ in range(5)]
    for x, y in zip(b1, b2):
        assert all(np.array_equal(getattr(x, k), getattr(y, k)) for k in ("x", "y", "w", "valid"))
    save_batch_cache(tmp_path / "cache.bin", b1)
    back = load_batch_cache(tmp_path / "cache.bin")
    for x, y in zip(b1, back):
        assert all(np.array_equal(getattr(x, k), getattr(y, k)) for k in ("x", "y", "w", "valid"))


# ---- task files ------------------------------------------------------------------

def test_classification_encoding(tmp_path):
    v = build_vocab(["red cat sad dog"], 20)
    ds = encode_classification([("red cat", "pos"), ("sad dog", "neg")], v, 6)
    assert ds.label_names == ["neg", "pos"] and list(ds.labels) == [1, 0]
    assert list(ds.tokens[0]) == [2, v.id("red"), v.id("cat"), 3, 0, 0]
    with pytest.raises(ValueError):
        encode_classification([("x", "other")], v, 6, ["neg", "pos"])


def test_conll_round_trip(tmp_path):
    (tmp_path / "a.conll").write_text("the O\nred B-X\ncat I-X\n\ndog B-X\n", encoding="utf-8")
    sents = read_conll(tmp_path / "a.conll")
    assert sents == [(["the", "red", "cat"], ["O", "B-X", "I-X"]), (["dog"], ["B-X"])]
    v = build_vocab(["the red cat dog"], 20)
    ds = encode_tagging(sents, v, 6)
    assert ds.label_names[0] == "O"
    assert list(ds.labels[0]) == [-1, 0, 1, 2, -1, -1]
    ds2 = load_task(tmp_path / "a.conll", "token_classification", v, 6)
    assert np.array_equal(ds.tokens, ds2.tokens)


def test_distill_batch_invariant(vocab):
    rng = np.random.default_rng(2)
    rows = [apply_mlm_masking(_seq(10, rng), vocab, 0.3, 0, i) for i in range(4)]
    b = DistillBatch.collate(rows)
    assert b.x.shape == (4, 10)
    assert np.array_equal(b.w == 1, b.y != IGNORE)
