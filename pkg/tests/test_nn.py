import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vip import nn
from vip.errors import CorruptFile, DegenerateNorm, DimensionMismatch, NonFiniteGradient, NonFiniteLoss, VersionMismatch


def _loop_forward(spec, params, x):
    """Plain-Python forward pass, written independently of the vectorized one."""
    p = params.views()
    h = [float(v) for v in x]
    for i in range(spec.n_layers):
        W, b = p[f"W{i}"], p[f"b{i}"]
        z = [sum(h[r] * W[r, c] for r in range(len(h))) + b[c] for c in range(W.shape[1])]
        if i < spec.n_layers - 1:
            z = [math.tanh(v) if spec.activation == "tanh" else max(v, 0.0) for v in z]
        h = z
    if spec.output_activation == "l2_normalize":
        norm = math.sqrt(sum(v * v for v in h))
        h = [v / norm for v in h]
    return np.array(h)


def test_layout_length_matches_widths():
    spec = nn.MlpSpec((3, 4, 2))
    assert spec.n_params() == 3 * 4 + 4 + 4 * 2 + 2
    params = nn.init_params(spec, np.random.default_rng(0))
    assert len(params) == spec.n_params()
    assert set(params.views()) == {"W0", "b0", "W1", "b1"}


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.MlpSpec((3,))
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 1), output_activation="l2_normalize")
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 2), activation="gelu")


def test_param_vector_rejects_wrong_length():
    with pytest.raises(DimensionMismatch):
        nn.ParamVector(np.zeros(5), (("W0", (2, 2)),))


def test_zero_network_outputs_zero():
    spec = nn.MlpSpec((4, 5, 3))
    out = nn.mlp_forward(spec, nn.zeros_params(spec), np.arange(4.0))
    assert np.array_equal(out, np.zeros(3))


def test_identity_layer_is_identity():
    spec = nn.MlpSpec((3, 3))
    params = nn.ParamVector(np.concatenate([np.eye(3).ravel(), np.zeros(3)]), spec.layout())
    x = np.array([0.3, -1.2, 2.5])
    assert np.array_equal(nn.mlp_forward(spec, params, x), x)


def test_forward_matches_loop_implementation():
    spec = nn.MlpSpec((2, 3, 2))
    params = nn.init_params(spec, np.random.default_rng(42))
    x = np.array([1.0, -0.5])
    assert np.allclose(nn.mlp_forward(spec, params, x), _loop_forward(spec, params, x), atol=1e-12)


@pytest.mark.parametrize("act,out", [("tanh", "identity"), ("relu", "identity"), ("tanh", "l2_normalize")])
def test_batched_forward_matches_rows(act, out):
    spec = nn.MlpSpec((4, 6, 3), act, out)
    rng = np.random.default_rng(1)
    params = nn.init_params(spec, rng)
    xs = rng.normal(size=(5, 4))
    batched = nn.mlp_forward(spec, params, xs)
    for x, row in zip(xs, batched):
        assert np.allclose(row, _loop_forward(spec, params, x), atol=1e-12)


def test_l2_output_has_unit_norm():
    spec = nn.MlpSpec((6, 8, 4), output_activation="l2_normalize")
    rng = np.random.default_rng(3)
    out = nn.mlp_forward(spec, nn.init_params(spec, rng), rng.normal(size=(50, 6)))
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_degenerate_norm():
    spec = nn.MlpSpec((2, 2), output_activation="l2_normalize")
    with pytest.raises(DegenerateNorm):
        nn.mlp_forward(spec, nn.zeros_params(spec), np.ones(2))


def test_input_width_checked():
    spec = nn.MlpSpec((3, 2))
    with pytest.raises(DimensionMismatch):
        nn.mlp_forward(spec, nn.zeros_params(spec), np.ones(4))
    with pytest.raises(DimensionMismatch):
        nn.mlp_gradient(spec, nn.zeros_params(spec), np.ones(3), np.ones(3))


def test_zero_upstream_gives_zero_gradient():
    spec = nn.MlpSpec((3, 4, 2))
    params = nn.init_params(spec, np.random.default_rng(0))
    grad, gin = nn.mlp_gradient(spec, params, np.ones(3), np.zeros(2))
    assert not grad.values.any() and not gin.any()


def test_scalar_linear_chain_rule():
    spec = nn.MlpSpec((1, 1))
    params = nn.ParamVector(np.array([2.5, 0.0]), spec.layout())
    grad, gin = nn.mlp_gradient(spec, params, np.array([0.7]), np.array([1.0]))
    assert grad.views()["W0"][0, 0] == pytest.approx(0.7)
    assert grad.views()["b0"][0] == pytest.approx(1.0)
    assert gin[0] == pytest.approx(2.5)


@pytest.mark.parametrize("act,out", [("tanh", "identity"), ("relu", "identity"), ("tanh", "l2_normalize")])
def test_gradient_matches_finite_differences(act, out):
    spec = nn.MlpSpec((3, 4, 2), act, out)
    rng = np.random.default_rng(7)
    params = nn.init_params(spec, rng)
    x = rng.normal(size=(6, 3))
    up = rng.normal(size=(6, 2))

    def loss(v):
        p = params.with_values(v)
        return float(np.sum(nn.mlp_forward(spec, p, x) * up)), nn.mlp_gradient(spec, p, x, up)[0].values

    assert nn.grad_check(loss, params) < 1e-4


def test_input_gradient_matches_finite_differences():
    spec = nn.MlpSpec((3, 5, 4), "tanh", "l2_normalize")
    rng = np.random.default_rng(8)
    params = nn.init_params(spec, rng)
    up = rng.normal(size=4)

    def loss(x):
        return float(nn.mlp_forward(spec, params, x) @ up), nn.mlp_gradient(spec, params, x, up)[1]

    assert nn.grad_check(loss, rng.normal(size=3)) < 1e-6


def test_loss_gradient_equals_two_pass_gradient():
    spec = nn.MlpSpec((3, 4, 2))
    rng = np.random.default_rng(5)
    params = nn.init_params(spec, rng)
    x, t = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
    loss, grad = nn.mlp_loss_gradient(spec, params, x, lambda y: (float(np.sum((y - t) ** 2)), 2 * (y - t)))
    y = nn.mlp_forward(spec, params, x)
    assert loss == pytest.approx(float(np.sum((y - t) ** 2)))
    assert np.allclose(grad.values, nn.mlp_gradient(spec, params, x, 2 * (y - t))[0].values)


def test_grad_check_quadratic():
    err = nn.grad_check(lambda p: (0.5 * float(p @ p), p.copy()), np.array([0.3, -2.0, 5.0]))
    assert err < 1e-8


def test_grad_check_rejects_bad_inputs():
    with pytest.raises(ValueError):
        nn.grad_check(lambda p: (0.0, p), np.zeros(2), h=0.0)
    with pytest.raises(NonFiniteLoss):
        nn.grad_check(lambda p: (float("nan"), p), np.zeros(2))


def test_grad_check_flags_wrong_gradient():
    assert nn.grad_check(lambda p: (0.5 * float(p @ p), 2 * p), np.array([1.0, 2.0])) > 0.1


# -- optimizer ---------------------------------------------------------------------

def _scalar(v):
    return nn.ParamVector(np.array([v]), (("w", (1,)),))


def test_adam_zero_gradient_is_noop():
    p = _scalar(1.5)
    p2, st2 = nn.adam_step(p, np.zeros(1), nn.OptimState.fresh(1))
    assert p2.values[0] == 1.5 and st2.step_count == 1


def test_adam_first_step_moves_by_learning_rate():
    p2, st2 = nn.adam_step(_scalar(0.0), np.array([1.0]), nn.OptimState.fresh(1, learning_rate=0.1))
    # m_hat = 1, v_hat = 1 after bias correction
    assert p2.values[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)
    assert st2.step_count == 1


def test_adam_matches_recurrence():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [0.5, -1.0, 2.0, 0.1, 0.1]
    w, m, v = 0.2, 0.0, 0.0
    p, st = _scalar(0.2), nn.OptimState.fresh(1, learning_rate=lr)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        p, st = nn.adam_step(p, np.array([g]), st)
        assert p.values[0] == pytest.approx(w, abs=1e-15)
    assert st.step_count == len(grads)


def test_adam_updates_shrink_under_constant_sign():
    p, st = _scalar(0.0), nn.OptimState.fresh(1, learning_rate=0.1, beta2=0.99)
    grads = [1.0, 0.5, 0.25, 0.125]
    steps = []
    for g in grads:
        before = p.values[0]
        p, st = nn.adam_step(p, np.array([g]), st)
        steps.append(abs(p.values[0] - before))
    assert all(b < a for a, b in zip(steps, steps[1:]))


def test_adam_rejects_nonfinite_and_mismatch():
    with pytest.raises(NonFiniteGradient):
        nn.adam_step(_scalar(0.0), np.array([np.inf]), nn.OptimState.fresh(1))
    with pytest.raises(DimensionMismatch):
        nn.adam_step(_scalar(0.0), np.zeros(2), nn.OptimState.fresh(1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=8),
       st.floats(1e-5, 1.0))
def test_adam_stays_finite(grads, lr):
    p, s = nn.ParamVector(np.zeros(len(grads)), (("w", (len(grads),)),)), nn.OptimState.fresh(len(grads), learning_rate=lr)
    for _ in range(3):
        p, s = nn.adam_step(p, np.array(grads), s)
    assert np.all(np.isfinite(p.values))
    assert np.all(np.isfinite(s.first_moment)) and np.all(np.isfinite(s.second_moment))


# -- checkpoint format -------------------------------------------------------------

def test_param_file_round_trip(tmp_path):
    spec = nn.MlpSpec((5, 7, 3), "tanh", "l2_normalize")
    params = nn.init_params(spec, np.random.default_rng(11))
    nn.save_params(params, tmp_path / "p.vipp")
    back = nn.load_params(tmp_path / "p.vipp")
    assert back.layout == params.layout
    assert np.array_equal(back.values, params.values)
    assert back.fingerprint() == params.fingerprint()


def test_param_file_layout_bytes():
    params = nn.ParamVector(np.array([1.0, 2.0]), (("b", (2,)),))
    blob = nn.to_bytes(params)
    assert blob[:4] == b"VIPP"
    # version u16, record count u32, name length u16, name, rank u8, dim u32, two f64 values
    assert len(blob) == 4 + 2 + 4 + 2 + 1 + 1 + 4 + 16
    assert np.frombuffer(blob[-16:], dtype="<f8").tolist() == [1.0, 2.0]


def test_param_file_errors():
    blob = nn.to_bytes(nn.init_params(nn.MlpSpec((2, 2)), np.random.default_rng(0)))
    with pytest.raises(CorruptFile):
        nn.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CorruptFile):
        nn.from_bytes(blob[:-3])
    with pytest.raises(VersionMismatch):
        nn.from_bytes(blob[:4] + (9).to_bytes(2, "little") + blob[6:])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(widths, seed):
    spec = nn.MlpSpec(tuple(widths))
    params = nn.init_params(spec, np.random.default_rng(seed))
    back = nn.from_bytes(nn.to_bytes(params))
    assert np.array_equal(back.values, params.values) and back.layout == params.layout


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_forward_is_deterministic(seed):
    spec = nn.MlpSpec((4, 6, 2), "relu")
    rng = np.random.default_rng(seed)
    params, x = nn.init_params(spec, rng), rng.normal(size=4)
    assert np.array_equal(nn.mlp_forward(spec, params, x), nn.mlp_forward(spec, params, x.copy()))
