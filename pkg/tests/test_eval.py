import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from recdistill.data import TaskDataset, build_vocab, encode_classification
from recdistill.eval import (
    EvalReport,
    HeadSpec,
    TaskHead,
    TaskModel,
    bio_spans,
    evaluate,
    f1_score,
    head_forward,
)
from recdistill.model import ConfigError, RecursiveStudent, count_parameters
from recdistill.model.encoder import ForwardTrace
from recdistill.numerics import Tensor
from recdistill.rng import derive_rng
from recdistill.toy import toy_classification


def _trace(h):
    return ForwardTrace(embedding_output=Tensor(h), hidden_states=[Tensor(h)])


def test_head_zero_projection_bias():
    head = TaskHead(HeadSpec("token_classification", 3, 0.0), 4, None)
    head.projection.bias.data[:] = 1.5
    out = head_forward(_trace(np.random.default_rng(0).normal(size=(2, 5, 4))), head)
    assert out.shape == (2, 5, 3) and np.all(out.data == 1.5)


def test_head_hand_logits_on_cls():
    head = TaskHead(HeadSpec("sequence_classification", 2, 0.0), 3, None)
    head.projection.weight.data[:] = [[1.0, 0.0], [2.0, -1.0], [0.0, 3.0]]
    head.projection.bias.data[:] = [0.5, -0.5]
    h = np.zeros((1, 4, 3))
    h[0, 0] = [1.0, 2.0, 3.0]
    h[0, 1:] = 99.0
    out = head_forward(_trace(h), head).data
    assert np.allclose(out, [[1 + 4 + 0.5, -2 + 9 - 0.5]], atol=0)


def test_head_shape_mismatch():
    head = TaskHead(HeadSpec("sequence_classification", 2), 8, None)
    with pytest.raises(ConfigError):
        head_forward(_trace(np.zeros((1, 3, 4))), head)
    with pytest.raises(ConfigError):
        HeadSpec("sequence_classification", 1)


def test_f1_examples():
    gold = ["B-X", "I-X", "O", "B-Y"]
    assert f1_score(gold, gold) == 1.0
    assert f1_score(["O"] * 4, gold) == 0.0
    pred = ["B-X", "I-X", "O", "O"]
    assert abs(f1_score(pred, gold) - 2 / 3) < 1e-15


def test_f1_token_micro():
    gold = ["B-X", "I-X", "O"]
    pred = ["B-X", "O", "B-X"]
    # tp=1, fp=1, fn=1
    assert abs(f1_score(pred, gold, "token_micro") - 0.5) < 1e-15
    with pytest.raises(ValueError):
        f1_score(["O"], ["O", "O"])


def test_stray_inside_repaired():
    assert bio_spans(["O", "I-X", "I-X", "B-Y"]) == {("X", 1, 3), ("Y", 3, 4)}
    assert bio_spans(["B-X", "I-Y"]) == {("X", 0, 1), ("Y", 1, 2)}


tags = st.lists(st.sampled_from(["O", "B-A", "I-A", "B-B", "I-B"]), min_size=1, max_size=12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(tags, st.integers(0, 10**6)), min_size=1, max_size=5))
def test_f1_bounded_and_permutation_invariant(data):
    gold = [g for g, _ in data]
    rng = np.random.default_rng(sum(s for _, s in data) % 2**32)
    pred = [[str(t) for t in rng.choice(["O", "B-A", "I-A", "B-B"], size=len(g))] for g in gold]
    f = f1_score(pred, gold)
    assert 0.0 <= f <= 1.0
    order = rng.permutation(len(gold))
    assert f == f1_score([pred[i] for i in order], [gold[i] for i in order])
    assert (f == 1.0) == all(bio_spans(p) == bio_spans(g) for p, g in zip(pred, gold))


@pytest.fixture(scope="module")
def task():
    rows = toy_classification(1000, seed=3)
    vocab = build_vocab([t for t, _ in rows], 60)
    ds = encode_classification(rows, vocab, 14)
    enc = RecursiveStudent(tiny_config(num_layers=2, vocab_size=len(vocab)), derive_rng(0))
    model = TaskModel(enc, TaskHead(HeadSpec("sequence_classification", 2), 16, derive_rng(1)))
    return model, ds


def test_evaluate_random_model(task):
    model, ds = task
    a = evaluate(model, ds)
    assert abs(a.accuracy - 0.5) <= 0.1
    assert a == evaluate(model, ds)
    assert a.params_total == count_parameters(model)
    for c in a.per_class.values():
        assert c["tp"] + c["fn"] == c["support"]
    assert sum(c["support"] for c in a.per_class.values()) == a.n_examples == 1000


def test_evaluate_permutation_invariant(task):
    model, ds = task
    order = np.random.default_rng(0).permutation(len(ds))
    a, b = evaluate(model, ds), evaluate(model, ds.subset(order))
    assert a == b


def test_evaluate_errors(task):
    model, ds = task
    with pytest.raises(ValueError):
        evaluate(model, ds.subset(np.array([], dtype=int)))
    bad = TaskDataset("token_classification", ds.tokens, np.zeros_like(ds.tokens), ["O", "B-X"])
    with pytest.raises(ConfigError):
        evaluate(model, bad)


def test_report_csv_round_trip(task):
    model, ds = task
    r = evaluate(model, ds.subset(np.arange(50)))
    back = EvalReport.from_csv(r.to_csv())
    assert back == r and back.ms_per_step == pytest.approx(r.ms_per_step)
    assert "accuracy" in r.pretty()
