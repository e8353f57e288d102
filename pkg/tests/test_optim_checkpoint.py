import io
import struct

import numpy as np
import pytest

from dave.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from dave.errors import CheckpointError
from dave.model import ModelBundle, configs_from_tensors
from dave.optim import SGD, OptimizerState, sgd_step
from dave.tensor import Tensor


def test_sgd_step_momentum_and_decay():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = OptimizerState(learning_rate=0.1, momentum=0.9, weight_decay=0.01)
    p.grad = np.array([0.5, 0.5], dtype=np.float32)
    sgd_step(p, state, "p")
    v1 = -0.1 * (np.array([0.5, 0.5]) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) + v1, rtol=1e-6)
    assert p.grad is None

    p.grad = np.array([0.0, 0.0], dtype=np.float32)
    before = p.data.copy()
    sgd_step(p, state, "p")
    v2 = 0.9 * v1 - 0.1 * 0.01 * before
    np.testing.assert_allclose(p.data, before + v2, rtol=1e-5)


def test_sgd_step_without_gradient_raises():
    with pytest.raises(ValueError):
        sgd_step(Tensor(np.zeros(2), requires_grad=True), OptimizerState(0.1))


def test_momentum_two_steps_move_one_point_nine_plain_steps():
    g = np.array([0.25, -1.0])
    plain = Tensor(np.zeros(2), requires_grad=True)
    plain.grad = g.copy()
    sgd_step(plain, OptimizerState(0.1, momentum=0.0, weight_decay=0.0), "p")

    p = Tensor(np.zeros(2), requires_grad=True)
    state = OptimizerState(0.1, momentum=0.9, weight_decay=0.0)
    p.grad = g.copy()
    sgd_step(p, state, "p")
    after_first = p.data.copy()
    p.grad = g.copy()
    sgd_step(p, state, "p")
    np.testing.assert_allclose(after_first, plain.data, rtol=1e-6)
    np.testing.assert_allclose(p.data - after_first, 1.9 * plain.data, rtol=1e-5)


def test_weight_decay_alone_shrinks_by_lr_wd_p():
    start = np.array([2.0, -4.0, 0.5])
    p = Tensor(start.copy(), requires_grad=True)
    p.grad = np.zeros(3)
    sgd_step(p, OptimizerState(0.1, momentum=0.0, weight_decay=0.01), "p")
    np.testing.assert_allclose(p.data, start - 0.1 * 0.01 * start, rtol=1e-6)


def test_sgd_skips_parameters_without_gradient():
    used = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    opt = SGD({"used": used, "unused": unused}, 0.5, momentum=0.9, weight_decay=0.1)
    used.grad = np.ones(3)
    opt.step()
    np.testing.assert_array_equal(unused.data, np.ones(3))
    assert "unused" not in opt.state.velocity
    assert np.all(used.data < 1.0)


def test_learning_rate_must_be_positive():
    with pytest.raises(ValueError):
        OptimizerState(0.0)
    opt = SGD({}, 0.1)
    with pytest.raises(ValueError):
        opt.set_learning_rate(-1.0)


def test_checkpoint_preserves_names_shapes_and_bits(tmp_path, rng):
    tensors = {
        "b/scalar": np.array(3.5, dtype=np.float32),
        "a/w": rng.normal(size=(2, 3, 4)).astype(np.float32),
        "c/ü": np.arange(5, dtype=np.float32),
    }
    path = str(tmp_path / "x.daveckpt")
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == sorted(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_layout_header():
    buf = io.BytesIO()
    write_checkpoint(buf, {"w": np.ones((2,), dtype=np.float32)})
    raw = buf.getvalue()
    assert raw[:8] == MAGIC
    assert struct.unpack("<II", raw[8:16]) == (1, 1)
    assert struct.unpack("<H", raw[16:18]) == (1,)
    assert raw[18:19] == b"w"
    assert struct.unpack("<B", raw[19:20]) == (1,)
    assert struct.unpack("<I", raw[20:24]) == (2,)
    assert np.frombuffer(raw[24:], dtype="<f4").tolist() == [1.0, 1.0]


def test_bad_magic_names_the_source():
    with pytest.raises(CheckpointError, match="model.bin"):
        read_checkpoint(io.BytesIO(b"NOTACKPT" + b"\0" * 8), source="model.bin")


def test_truncated_checkpoint():
    buf = io.BytesIO()
    write_checkpoint(buf, {"w": np.ones((4, 4), dtype=np.float32)})
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(io.BytesIO(buf.getvalue()[:-3]))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(str(tmp_path / "nope.daveckpt"))


def test_model_bundle_round_trip(tmp_path, tiny_model):
    path = tiny_model.save(str(tmp_path / "m.daveckpt"))
    back = ModelBundle.load(path)
    assert back.vocab == tiny_model.vocab
    assert back.fvpn.config == tiny_model.fvpn.config
    assert back.aln.config == tiny_model.aln.config
    for k, v in tiny_model.tensors().items():
        np.testing.assert_array_equal(back.tensors()[k], v)


def test_configs_inferred_without_sidecar(tiny_model):
    fvpn_cfg, aln_cfg = configs_from_tensors(tiny_model.tensors())
    assert fvpn_cfg.knowledge_dim == tiny_model.fvpn.config.knowledge_dim
    assert fvpn_cfg.conv1 == tiny_model.fvpn.config.conv1
    assert aln_cfg.depth == tiny_model.aln.config.depth
    assert aln_cfg.num_types == tiny_model.aln.config.num_types


def test_bundle_rejects_mismatched_feature_dims(tiny_fvpn_config, tiny_aln_config):
    from dataclasses import replace

    with pytest.raises(ValueError):
        ModelBundle.create(tiny_fvpn_config, replace(tiny_aln_config, feature_dim=9))
