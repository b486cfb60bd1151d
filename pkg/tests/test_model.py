import numpy as np
import pytest

from dqmq import tensor as T
from dqmq.errors import ConfigError, ContractError
from dqmq.model import (SoftDecision, build_backbone, check_actions, forward, forward_quantized,
                        manifest_param_count, quantized_weights)
from dqmq.tensor import Tensor

from conftest import TINY_MODEL


@pytest.fixture
def batch():
    return np.random.default_rng(0).uniform(size=(3, 3, 8, 8)).astype(np.float32)


def test_default_backbone_shape():
    m = build_backbone()
    assert [s.name for s in m.quantizable] == [f"conv{i}" for i in range(1, 9)] + ["fc"]
    assert m.param_counts == [216, 576, 1152, 2304, 4608, 9216, 9216, 9216, 320]
    assert m.num_parameters() == manifest_param_count(m.layers)


def test_forward_logits_shape(tiny_model, batch):
    assert forward(tiny_model, batch).shape == (3, 10)


def test_unknown_config_key():
    with pytest.raises(ConfigError):
        build_backbone({"widht": [1, 2, 3, 4]})


def test_seeded_init_is_deterministic():
    a, b = build_backbone(TINY_MODEL, seed=5), build_backbone(TINY_MODEL, seed=5)
    for (n, _, x), (_, _, y) in zip(a.named_tensors(), b.named_tensors()):
        np.testing.assert_array_equal(x.data, y.data, err_msg=n)


def test_full_bits_is_full_precision(tiny_model, batch):
    ref = forward(tiny_model, batch).data
    out = forward_quantized(tiny_model, batch, [32] * 9).data
    np.testing.assert_array_equal(out, ref)


def test_exact_mode_matches_full_precision(tiny_model, batch):
    ref = forward(tiny_model, batch).data
    for bits in (0, 1, 2, 4, 8):
        out = forward_quantized(tiny_model, batch, [bits] * 9, rounding=False).data
        np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)


def test_quantized_forward_never_writes_masters(tiny_model, batch):
    before = tiny_model.state()
    for bits in (0, 1, 2, 4, 8, 16):
        forward_quantized(tiny_model, batch, [bits] * 9)
    for name, arr in tiny_model.state().items():
        np.testing.assert_array_equal(arr, before[name], err_msg=name)


def test_pruned_layer_is_bias_only(tiny_model, batch):
    actions = [32] * 9
    actions[-1] = 0
    tiny_model.biases["fc"].data[:] = np.arange(10)
    out = forward_quantized(tiny_model, batch, actions).data
    np.testing.assert_array_equal(out, np.tile(np.arange(10, dtype=np.float32), (3, 1)))


def test_one_hot_soft_decision_equals_hard(tiny_model, batch):
    pool = (2, 4, 8)
    for k, bits in enumerate(pool):
        probs = np.eye(3, dtype=np.float32)[k]
        soft = forward(tiny_model, batch, lambda i, s, h: SoftDecision(pool, Tensor(probs))).data
        hard = forward_quantized(tiny_model, batch, [bits] * 9).data
        np.testing.assert_allclose(soft, hard, rtol=1e-6, atol=1e-6)


def test_quantized_weights(tiny_model):
    qw = quantized_weights(tiny_model, [0, 1, 2, 4, 8, 16, 32, 8, 8])
    assert not qw["conv1"].any()
    assert len(np.unique(np.abs(qw["conv2"]))) == 1            # binary: one magnitude
    assert len(np.unique(qw["conv3"])) <= 3                     # ternary
    np.testing.assert_array_equal(qw["conv7"], tiny_model.weights["conv7"].data)


def test_check_actions():
    m = build_backbone(TINY_MODEL)
    assert check_actions(m, [8] * 9) == [8] * 9
    with pytest.raises(ContractError):
        check_actions(m, [8] * 8)
    with pytest.raises(ContractError):
        check_actions(m, [3] * 9)
    with pytest.raises(ContractError):
        check_actions(m, [16] * 9, pools=[(2, 4, 8)] * 9)


def test_gradients_reach_every_master(tiny_model, batch):
    logits = forward_quantized(tiny_model, batch, [4] * 9)
    T.backward(T.cross_entropy(logits, np.array([0, 1, 2])))
    for name, _, t in tiny_model.named_tensors():
        assert t.grad is not None and np.isfinite(t.grad).all(), name
