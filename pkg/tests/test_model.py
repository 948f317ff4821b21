"""MLP shape, init, determinism, equivariance and checkpoint tests."""

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from fairmargin.autodiff import Tape, bce_with_logits
from fairmargin.model import (
    MlpConfig,
    forward,
    init_mlp,
    load_metadata,
    load_params,
    predict_scores,
    save_params,
)
from conftest import finite_diff_grads, max_rel_error


def test_pure_linear_model_shapes():
    params = init_mlp(MlpConfig(input_dim=4, hidden_dims=(), num_classes=1, init_seed=0))
    assert len(params.layers) == 1
    w, b = params.layers[0]
    assert w.shape == (4, 1) and b.shape == (1,)


def test_biases_exactly_zero_after_init():
    params = init_mlp(MlpConfig(input_dim=5, hidden_dims=(8, 3), num_classes=2, init_seed=9))
    for _, b in params.layers:
        assert_array_equal(b.data, np.zeros_like(b.data))


def test_glorot_limits_respected():
    cfg = MlpConfig(input_dim=50, hidden_dims=(20,), num_classes=3, init_seed=1)
    params = init_mlp(cfg)
    for (fan_in, fan_out), (w, _) in zip(cfg.layer_dims, params.layers):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.all(np.abs(w.data) <= limit)
        assert np.std(w.data) > 0.1 * limit  # actually random, not degenerate


def test_same_seed_bitwise_identical_different_seed_differs():
    cfg7 = MlpConfig(input_dim=6, hidden_dims=(4,), num_classes=2, init_seed=7)
    a = init_mlp(cfg7)
    b = init_mlp(cfg7)
    for x, y in zip(a.arrays(), b.arrays()):
        assert_array_equal(x, y)
    c = init_mlp(MlpConfig(input_dim=6, hidden_dims=(4,), num_classes=2, init_seed=8))
    assert any(not np.array_equal(x, y) for x, y in zip(a.arrays(), c.arrays()))


def test_zero_params_give_half_scores():
    params = init_mlp(MlpConfig(input_dim=3, hidden_dims=(2,), num_classes=2, init_seed=0))
    for w, _ in params.layers:
        w.data[:] = 0.0
    scores = predict_scores(params, np.random.default_rng(0).normal(size=(5, 3)))
    assert_array_equal(scores, 0.5 * np.ones((5, 2)))


def test_linear_logit_is_dot_product():
    params = init_mlp(MlpConfig(input_dim=2, hidden_dims=(), num_classes=1, init_seed=0))
    params.layers[0][0].data[:] = np.array([[1.0], [-1.0]])
    tape = Tape()
    params.attach(tape)
    logits = forward(params, tape.constant([[2.0, 1.0]]))
    assert logits.data[0, 0] == 1.0


def test_batch_output_shape():
    params = init_mlp(MlpConfig(input_dim=4, hidden_dims=(8,), num_classes=3, init_seed=2))
    tape = Tape()
    params.attach(tape)
    out = forward(params, tape.constant(np.zeros((64, 4))))
    assert out.shape == (64, 3)


def test_input_dim_mismatch_raises():
    params = init_mlp(MlpConfig(input_dim=4, hidden_dims=(), num_classes=1, init_seed=0))
    tape = Tape()
    params.attach(tape)
    with pytest.raises(ValueError, match="input_dim"):
        forward(params, tape.constant(np.zeros((2, 5))))


def test_batch_order_equivariance():
    rng = np.random.default_rng(21)
    params = init_mlp(MlpConfig(input_dim=5, hidden_dims=(7,), num_classes=2, init_seed=3))
    x = rng.normal(size=(10, 5))
    perm = rng.permutation(10)
    assert_array_equal(predict_scores(params, x)[perm], predict_scores(params, x[perm]))


def test_loss_gradient_through_model_matches_fd():
    rng = np.random.default_rng(17)
    x_val = rng.normal(size=(6, 4)) + 0.1
    y = (rng.random((6, 2)) < 0.5).astype(float)
    params = init_mlp(MlpConfig(input_dim=4, hidden_dims=(5,), num_classes=2, init_seed=4))

    def run() -> float:
        tape = Tape()
        params.attach(tape)
        return bce_with_logits(forward(params, tape.constant(x_val)), y).item()

    tape = Tape()
    params.attach(tape)
    tape.backward(bce_with_logits(forward(params, tape.constant(x_val)), y))
    analytic = [a.copy() for a in [t.grad for t in params.tensors()]]
    fd = finite_diff_grads(run, params.arrays())
    assert max_rel_error(analytic, fd) < 1e-4


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        params = init_mlp(MlpConfig(input_dim=3, hidden_dims=(4, 2), num_classes=2, init_seed=5))
        for w, _ in params.layers:
            w.data *= np.pi  # irrational values exercise float serialization
        path = tmp_path / "ckpt.json"
        save_params(params, path, metadata={"run_seed": 42, "note": "x"})
        loaded = load_params(path)
        assert loaded.config == params.config
        for a, b in zip(params.arrays(), loaded.arrays()):
            assert_array_equal(a, b)
        assert load_metadata(path)["run_seed"] == 42

    def test_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"format": "something-else"}')
        with pytest.raises(ValueError, match="checkpoint"):
            load_params(path)


def test_config_validation():
    with pytest.raises(ValueError):
        MlpConfig(input_dim=0, hidden_dims=(4,), num_classes=1)
    with pytest.raises(ValueError):
        MlpConfig(input_dim=3, hidden_dims=(0,), num_classes=1)
    with pytest.raises(ValueError, match="activation"):
        MlpConfig(input_dim=3, hidden_dims=(), num_classes=1, activation="tanh")
