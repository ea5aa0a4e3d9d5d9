import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_tokens, tiny_config
from recdistill.data import DistillBatch
from recdistill.distill import (
    LayerMap,
    LossWeights,
    alignment_loss,
    attention_alignment_loss,
    build_layer_map,
    embedding_loss,
    hidden_alignment_loss,
    mlm_loss,
    output_loss,
    total_loss,
)
from recdistill.model import ConfigError, RecursiveStudent, TeacherModel, materialize_unrolled
from recdistill.model.encoder import ForwardTrace
from recdistill.numerics import Tape, Tensor, no_grad
from recdistill.rng import derive_rng


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _batch(tokens, rng, p=0.3):
    w = (rng.random(tokens.shape) < p) & (tokens != 0)
    w[0, 1] = True
    y = np.where(w, tokens, -1)
    return DistillBatch(tokens, y, w.astype(np.int64), tokens != 0)


# ---- MLM -----------------------------------------------------------------------

def test_mlm_zero_labels():
    assert mlm_loss(t(np.random.default_rng(0).normal(size=(1, 3, 4))), np.full((1, 3), -1)).item() == 0.0
    assert mlm_loss(t(np.zeros((1, 3, 4))), np.zeros((1, 3, 4))).item() == 0.0


def test_mlm_uniform_one_masked():
    labels = np.array([[-1, 2, -1]])
    assert math.isclose(mlm_loss(t(np.zeros((1, 3, 4))), labels).item(), math.log(4), rel_tol=1e-14)


def test_mlm_perfect_logits():
    logits = np.full((1, 2, 4), -1e4)
    logits[0, 0, 1] = logits[0, 1, 3] = 1e4
    assert mlm_loss(t(logits), np.array([[1, 3]])).item() < 1e-12


def test_mlm_normalisation_vs_raw():
    logits = t(np.random.default_rng(1).normal(size=(2, 3, 5)))
    labels = np.array([[0, -1, 4], [-1, 2, -1]])
    assert math.isclose(mlm_loss(logits, labels, raw_sums=True).item(), 3 * mlm_loss(logits, labels).item(), rel_tol=1e-13)


# ---- attention / hidden --------------------------------------------------------

def test_attention_examples():
    A = np.random.default_rng(0).dirichlet(np.ones(4), size=(2, 4))
    assert attention_alignment_loss(t(A), t(A)).item() == 0.0
    assert attention_alignment_loss(t([[[1.0]]]), t([[[1.0]]])).item() == 0.0
    s = t([[[1.0, 0.0], [0.5, 0.5]]])
    q = t([[[0.5, 0.5], [0.25, 0.75]]])
    expected = (math.log(2) + 0.5 * math.log(2) + 0.5 * math.log(2 / 3)) / 2
    assert math.isclose(attention_alignment_loss(s, q).item(), expected, rel_tol=1e-12)


def test_attention_head_mismatch():
    with pytest.raises(ConfigError):
        attention_alignment_loss(t(np.full((1, 2, 3, 3), 1 / 3)), t(np.full((1, 1, 3, 3), 1 / 3)))


def test_attention_ignores_padded_queries():
    rng = np.random.default_rng(2)
    s = rng.dirichlet(np.ones(3), size=(1, 2, 3))
    q = rng.dirichlet(np.ones(3), size=(1, 2, 3))
    valid = np.array([[True, True, False]])
    a = attention_alignment_loss(t(s), t(q), valid).item()
    q2 = q.copy()
    q2[0, :, 2] = rng.dirichlet(np.ones(3), size=2)
    assert a == attention_alignment_loss(t(s), t(q2), valid).item()


def test_hidden_examples():
    H = np.random.default_rng(0).normal(size=(2, 3, 4))
    assert abs(hidden_alignment_loss(t(H), t(H)).item()) < 1e-15
    assert abs(hidden_alignment_loss(t(2 * H), t(H)).item()) < 1e-15
    assert math.isclose(hidden_alignment_loss(t(-H), t(H)).item(), 2.0, rel_tol=1e-14)


def test_embedding_examples():
    E = np.random.default_rng(3).normal(size=(1, 5, 4))
    assert abs(embedding_loss(t(E), t(E)).item()) < 1e-15
    assert abs(embedding_loss(t(3 * E), t(E)).item()) < 1e-15
    assert math.isclose(embedding_loss(t(-E), t(E)).item(), 2.0, rel_tol=1e-14)


# ---- alignment -----------------------------------------------------------------

def _trace(hidden, maps, valid):
    return ForwardTrace(embedding_output=t(np.zeros_like(hidden[0])), hidden_states=[t(h) for h in hidden],
                        attention_maps=[t(m) for m in maps], valid=valid)


def test_alignment_copied_trace_is_zero():
    rng = np.random.default_rng(0)
    hid = [rng.normal(size=(1, 3, 4)) for _ in range(4)]
    maps = [rng.dirichlet(np.ones(3), size=(1, 2, 3)) for _ in range(4)]
    teacher = _trace(hid, maps, np.ones((1, 3), bool))
    lmap = build_layer_map(2, 4, "uniform_stride")
    student = _trace([hid[1], hid[3]], [maps[1], maps[3]], np.ones((1, 3), bool))
    loss, parts = alignment_loss(student, teacher, lmap)
    assert abs(loss.item()) < 1e-14 and len(parts) == 2


def test_alignment_is_sum_of_layers_and_none_skips():
    rng = np.random.default_rng(1)
    valid = np.ones((1, 3), bool)
    th = [rng.normal(size=(1, 3, 4)) for _ in range(2)]
    tm = [rng.dirichlet(np.ones(3), size=(1, 2, 3)) for _ in range(2)]
    sh = [rng.normal(size=(1, 3, 4)) for _ in range(2)]
    sm = [rng.dirichlet(np.ones(3), size=(1, 2, 3)) for _ in range(2)]
    teacher, student = _trace(th, tm, valid), _trace(sh, sm, valid)
    lmap = build_layer_map(2, 2)
    loss, parts = alignment_loss(student, teacher, lmap)
    terms = [attention_alignment_loss(t(sm[i]), t(tm[i]), valid).item() + hidden_alignment_loss(t(sh[i]), t(th[i]), valid).item() for i in range(2)]
    assert math.isclose(loss.item(), sum(terms), rel_tol=1e-13)
    assert math.isclose(sum(a + h for a, h in parts), sum(terms), rel_tol=1e-13)
    none, parts = alignment_loss(student, teacher, lmap, "none")
    assert none.item() == 0.0 and parts == []


def test_alignment_mode_invariance():
    rng = np.random.default_rng(4)
    valid = np.ones((1, 3), bool)
    th, tm = [rng.normal(size=(1, 3, 4))], [rng.dirichlet(np.ones(3), size=(1, 2, 3))]
    sh, sm = [rng.normal(size=(1, 3, 4))], [rng.dirichlet(np.ones(3), size=(1, 2, 3))]
    teacher, lmap = _trace(th, tm, valid), build_layer_map(1, 1)
    sm2 = [rng.dirichlet(np.ones(3), size=(1, 2, 3))]
    sh2 = [sh[0] + rng.normal(size=sh[0].shape)]
    h1 = alignment_loss(_trace(sh, sm, valid), teacher, lmap, "hidden_only")[0].item()
    h2 = alignment_loss(_trace(sh, sm2, valid), teacher, lmap, "hidden_only")[0].item()
    a1 = alignment_loss(_trace(sh, sm, valid), teacher, lmap, "attention_only")[0].item()
    a2 = alignment_loss(_trace(sh2, sm, valid), teacher, lmap, "attention_only")[0].item()
    assert h1 == h2 and a1 == a2


# ---- output --------------------------------------------------------------------

def test_output_examples():
    logits = np.random.default_rng(0).normal(size=(1, 3, 5))
    assert output_loss(t(logits), logits, np.ones((1, 3))).item() == 0.0
    assert output_loss(t(logits), logits + 1.0, np.zeros((1, 3))).item() == 0.0
    s = np.array([[[1e4, -1e4]]])
    assert math.isclose(output_loss(t(s), np.zeros((1, 1, 2)), np.ones((1, 1))).item(), math.log(2), rel_tol=1e-12)


def test_output_raw_sums_and_direction():
    rng = np.random.default_rng(5)
    s, q = rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 4, 3))
    w = np.array([[1, 0, 1, 1]])
    norm = output_loss(t(s), q, w).item()
    assert math.isclose(output_loss(t(s), q, w, raw_sums=True).item(), 3 * norm, rel_tol=1e-13)
    assert output_loss(t(s), q, w, teacher_first=True).item() != norm


# ---- totals --------------------------------------------------------------------

def test_total_arithmetic_example():
    w = LossWeights()
    assert (w.lambda_mlm, w.lambda_align, w.lambda_out) == (1.0, 3.0, 5.0)
    assert 1 * w.lambda_mlm + 2 * w.lambda_align + 3 * w.lambda_out == 22


@pytest.fixture(scope="module")
def pair():
    cfg = tiny_config(num_layers=2)
    teacher = TeacherModel(cfg, derive_rng(0, "t"))
    student = RecursiveStudent(cfg.replace(adapter_bottleneck=3, embedding_rank=8), derive_rng(0, "s"))
    rng = np.random.default_rng(0)
    tokens = random_tokens(rng, batch=3, seq=6)
    batch = _batch(tokens, rng)
    with no_grad():
        tt = teacher.forward(tokens)
    return teacher, student, batch, tt


def test_report_total_identity(pair):
    teacher, student, batch, tt = pair
    ts = student.forward(batch.x)
    for weights in (LossWeights(), LossWeights(lambda_mlm=0.3, lambda_align=0.7, lambda_out=2.0, embed_loss_enabled=True, lambda_embed=1.5)):
        r = total_loss(batch, ts, tt, weights, build_layer_map(2, 2))
        expected = weights.lambda_mlm * r.mlm + weights.lambda_align * r.align + weights.lambda_out * r.out
        if weights.embed_loss_enabled:
            expected += weights.lambda_embed * r.embed
        assert abs(r.total - expected) < 1e-12
        assert math.isclose(r.align, r.att + r.hidden, rel_tol=1e-12)
        assert min(r.mlm, r.att, r.hidden, r.out, r.embed) >= 0


@pytest.mark.parametrize("which", ["lambda_mlm", "lambda_align", "lambda_out"])
def test_total_linear_in_each_lambda(pair, which):
    teacher, student, batch, tt = pair
    ts = student.forward(batch.x)
    lmap = build_layer_map(2, 2)
    vals = [total_loss(batch, ts, tt, LossWeights(**{which: lam}), lmap).total for lam in (0.0, 1.0, 2.5)]
    slope = vals[1] - vals[0]
    assert math.isclose(vals[2], vals[0] + 2.5 * slope, rel_tol=1e-12, abs_tol=1e-12)


def test_mode_none_ignores_lambda_align(pair):
    teacher, student, batch, tt = pair
    ts = student.forward(batch.x)
    lmap = build_layer_map(2, 2)
    a = total_loss(batch, ts, tt, LossWeights(alignment_mode="none", lambda_align=0.0), lmap)
    b = total_loss(batch, ts, tt, LossWeights(alignment_mode="none", lambda_align=1e6), lmap)
    assert a.total == b.total and a.align == 0.0


def test_embed_off_by_default(pair):
    teacher, student, batch, tt = pair
    r = total_loss(batch, student.forward(batch.x), tt, LossWeights(), build_layer_map(2, 2))
    assert not LossWeights().embed_loss_enabled and r.embed == 0.0


def test_self_distillation_fixpoint(pair):
    teacher, _, batch, tt = pair
    clone = copy.deepcopy(teacher)
    r = total_loss(batch, clone.forward(batch.x), tt, LossWeights(embed_loss_enabled=True), build_layer_map(2, 2))
    assert abs(r.align) < 1e-12 and abs(r.out) < 1e-12 and abs(r.embed) < 1e-12


def test_unrolled_student_self_distillation():
    s = RecursiveStudent(tiny_config(num_layers=3, adapter_bottleneck=2), derive_rng(1))
    u = materialize_unrolled(s)
    rng = np.random.default_rng(1)
    batch = _batch(random_tokens(rng), rng)
    with no_grad():
        tt = u.forward(batch.x)
    r = total_loss(batch, s.forward(batch.x), tt, LossWeights(), build_layer_map(3, 3))
    assert abs(r.align) < 1e-10 and abs(r.out) < 1e-10


def test_gradients_reach_only_student(pair):
    teacher, student, batch, tt = pair
    student.zero_grad()
    with Tape() as tape:
        report = total_loss(batch, student.forward(batch.x), tt, LossWeights(), build_layer_map(2, 2))
    tape.backward(report.loss)
    assert all(p.grad is None for p in teacher.parameters())
    assert any(p.grad is not None and np.any(p.grad) for p in student.parameters())


def test_log_line_parseable(pair):
    teacher, student, batch, tt = pair
    r = total_loss(batch, student.forward(batch.x), tt, LossWeights(), build_layer_map(2, 2))
    fields = dict(kv.split("=") for kv in r.log_line(7).split())
    assert fields["step"] == "7" and math.isclose(float(fields["total"]), r.total, rel_tol=1e-9)


# ---- layer maps ----------------------------------------------------------------

def test_layer_map_examples():
    assert build_layer_map(12, 12).mapping == tuple(range(1, 13))
    assert build_layer_map(6, 12, "uniform_stride").mapping == (2, 4, 6, 8, 10, 12)
    assert build_layer_map(1, 12, "uniform_stride").mapping == (12,)
    with pytest.raises(ConfigError):
        build_layer_map(6, 12, "identity")
    with pytest.raises(ConfigError):
        build_layer_map(13, 12, "uniform_stride")
    with pytest.raises(ConfigError):
        LayerMap(2, 4, (3, 3))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 24).flatmap(lambda lt: st.tuples(st.integers(1, lt), st.just(lt))))
def test_uniform_stride_is_valid_map(pair):
    ls, lt = pair
    m = build_layer_map(ls, lt, "uniform_stride")
    assert len(m.mapping) == ls and m.mapping[-1] == lt
    assert all(m(l) == math.ceil(l * lt / ls) for l in range(1, ls + 1))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=6, max_size=6), st.lists(st.floats(-30, 30), min_size=6, max_size=6))
def test_output_loss_finite_and_nonnegative(a, b):
    s = np.array(a).reshape(1, 2, 3)
    q = np.array(b).reshape(1, 2, 3)
    v = output_loss(t(s), q, np.ones((1, 2))).item()
    assert math.isfinite(v) and v >= -1e-12
