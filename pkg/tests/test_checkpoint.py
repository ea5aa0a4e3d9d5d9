import numpy as np
import pytest

from conftest import random_tokens, tiny_config
from recdistill.checkpoint import CheckpointError, header_vocab, load_checkpoint, save_checkpoint
from recdistill.data import build_vocab
from recdistill.eval import HeadSpec
from recdistill.model import RecursiveStudent, TeacherModel
from recdistill.rng import derive_rng
from recdistill.train import attach_head


def _same(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(sa[k].dtype == sb[k].dtype and sa[k].tobytes() == sb[k].tobytes() for k in sa)


@pytest.mark.parametrize("make", [
    lambda: TeacherModel(tiny_config(), derive_rng(0)),
    lambda: RecursiveStudent(tiny_config(adapter_bottleneck=3, embedding_rank=8), derive_rng(1)),
    lambda: RecursiveStudent(tiny_config(dtype="float32"), derive_rng(2)),
    lambda: attach_head(RecursiveStudent(tiny_config(adapter_bottleneck=2), derive_rng(3)), HeadSpec("token_classification", 3, 0.1, ("O", "B-X", "I-X")), 0),
])
def test_round_trip_bit_exact(make, tmp_path):
    model = make()
    vocab = build_vocab(["a b c d"], 10)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, vocab, {"note": "x"})
    back, header = load_checkpoint(path)
    assert type(back) is type(model) and _same(model, back)
    assert header_vocab(header) == vocab and header["meta"] == {"note": "x"}
    save_checkpoint(tmp_path / "again.ckpt", back, vocab, {"note": "x"})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_loaded_model_forward_identical(tmp_path):
    model = RecursiveStudent(tiny_config(adapter_bottleneck=3), derive_rng(5))
    save_checkpoint(tmp_path / "m.ckpt", model)
    back, header = load_checkpoint(tmp_path / "m.ckpt")
    tokens = random_tokens(np.random.default_rng(0))
    assert np.array_equal(model.forward(tokens).logits.data, back.forward(tokens).logits.data)
    assert header_vocab(header) is None


def test_float32_values_survive(tmp_path):
    model = RecursiveStudent(tiny_config(dtype="float32"), derive_rng(2))
    save_checkpoint(tmp_path / "m.ckpt", model)
    back, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert back.block.query.weight.dtype == np.float32


@pytest.mark.parametrize("damage", ["flip", "truncate", "magic", "empty"])
def test_corrupt_files_rejected(damage, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, TeacherModel(tiny_config(), derive_rng(0)))
    blob = bytearray(path.read_bytes())
    if damage == "flip":
        blob[len(blob) // 2] ^= 0x01
    elif damage == "truncate":
        blob = blob[: len(blob) - 100]
    elif damage == "magic":
        blob[:8] = b"NOTACKPT"
    else:
        blob = bytearray()
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")
