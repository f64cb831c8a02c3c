import numpy as np
import pytest

from cgemu.constants import HALF_LOG_2PI
from cgemu.error_handlers import GraphError, ValidationError
from cgemu.neuralnet import (
    GRU_TENSORS,
    GruParams,
    ParamStore,
    Tape,
    adam_update,
    add_gru,
    backward,
    dense_forward,
    dropout_forward,
    finite_diff_check,
    gaussian_nll,
    gru_forward
)


def _zero_gru(H, d):
    shapes = {'W': (H, d), 'U': (H, H), 'b': (H,)}
    return GruParams(**{
        name: np.zeros(shapes[name[0]]) for name in GRU_TENSORS
    })


def _sig(a):
    return 1.0 / (1.0 + np.exp(-a))


def test_gru_zero_parameters_halve_state():
    h = np.array([1.0, -2.0, 4.0])
    result = gru_forward(_zero_gru(3, 2), h, np.array([0.3, 0.7]))
    np.testing.assert_allclose(result, 0.5 * h, rtol=0, atol=1e-15)


def test_gru_closed_update_gate_keeps_state():
    params = _zero_gru(3, 2)
    params.b_z[:] = -50.0
    h = np.array([0.2, -0.4, 0.9])
    result = gru_forward(params, h, np.array([1.0, 1.0]))
    np.testing.assert_allclose(result, h, rtol=0, atol=1e-15)


def test_gru_matches_formula_oracle(rng):
    store = ParamStore()
    add_gru(store, 'gru', 2, 3, rng)
    for name in store.names():
        store[name][...] = rng.standard_normal(store[name].shape)
    p = GruParams.from_store(store)
    h = rng.standard_normal(3)
    x = rng.standard_normal(2)
    z = _sig(p.W_z @ x + p.U_z @ h + p.b_z)
    r = _sig(p.W_r @ x + p.U_r @ h + p.b_r)
    c = np.tanh(p.W_c @ x + p.U_c @ (r * h) + p.b_c)
    expected = (1 - z) * h + z * c
    np.testing.assert_allclose(
        gru_forward(p, h, x), expected, rtol=0, atol=1e-12
    )


def test_gru_shape_mismatch():
    with pytest.raises(ValidationError):
        gru_forward(_zero_gru(3, 2), np.zeros(3), np.zeros(4))


def test_dense_forward_cases(rng):
    b = np.array([0.5, -1.0])
    np.testing.assert_array_equal(
        dense_forward(np.zeros((2, 3)), b, 'tanh', np.ones(3)), np.tanh(b)
    )
    x = rng.standard_normal(4)
    np.testing.assert_array_equal(
        dense_forward(np.eye(4), np.zeros(4), 'identity', x), x
    )
    W = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    expected = [sum(W[i, j] * x[j] for j in range(4)) + b[i] for i in range(3)]
    np.testing.assert_allclose(
        dense_forward(W, b, 'identity', x), expected, rtol=0, atol=1e-12
    )


def test_dense_forward_unknown_activation():
    with pytest.raises(ValidationError):
        dense_forward(np.eye(2), np.zeros(2), 'relu', np.ones(2))


def test_dropout_eval_and_zero_rate_are_identity(rng):
    x = rng.standard_normal(10)
    np.testing.assert_array_equal(dropout_forward(x, 0.3, False, rng)[0], x)
    np.testing.assert_array_equal(dropout_forward(x, 0.0, True, rng)[0], x)


def test_dropout_preserves_mean(rng):
    y, mask = dropout_forward(np.ones(100_000), 0.3, True, rng)
    assert abs(y.mean() - 1.0) < 0.01, (
        'Инвертированный dropout должен сохранять среднее в пределах 1%.'
    )
    assert mask is not None


def test_dropout_rate_validated():
    with pytest.raises(ValidationError):
        dropout_forward(np.ones(3), 1.0, True)


@pytest.mark.parametrize('residual, log_scale, expected', [
    (0.0, 0.0, 0.9189385),
    (1.0, 0.0, 1.4189385),
    (0.0, np.log(2.0), 1.6120857),
])
def test_gaussian_nll_values(residual, log_scale, expected):
    assert gaussian_nll([residual], log_scale) == pytest.approx(
        expected, abs=1e-7
    ), 'Значение гауссова NLL не совпадает с эталоном.'


def test_gaussian_nll_rejects_empty_residual():
    with pytest.raises(ValidationError):
        gaussian_nll([], 0.0)


def test_gaussian_nll_minimized_at_residual_scale(rng):
    residual = 0.7 * rng.standard_normal(50)
    best = 0.5 * np.log(np.mean(residual ** 2))
    value = gaussian_nll(residual, best)
    for shift in (1e-3, 1e-2, 0.5):
        assert value < gaussian_nll(residual, best + shift)
        assert value < gaussian_nll(residual, best - shift), (
            'Минимум NLL по log_scale достигается при 0.5 log mean(r^2).'
        )


def _dense_store(rng):
    store = ParamStore()
    store.add('layer.W', rng.standard_normal((2, 3)))
    store.add('layer.b', rng.standard_normal(2))
    store.add('unused', rng.standard_normal(4))
    return store


def test_tape_nll_without_constant(rng):
    store = _dense_store(rng)
    x = rng.standard_normal((3, 3))
    target = rng.standard_normal((3, 2))
    results = []
    for nll_constant in (True, False):
        tape = Tape(store, nll_constant=nll_constant)
        out = tape.dense(
            tape.param('layer.W'), tape.param('layer.b'), 'tanh',
            tape.constant(x),
        )
        loss = tape.gaussian_nll(out, target, tape.constant(0.3))
        results.append((float(loss.value), backward(tape, loss)))
    (full, full_grads), (bare, bare_grads) = results
    assert full - bare == pytest.approx(6 * HALF_LOG_2PI, abs=1e-12)
    for name, grad in full_grads.items():
        np.testing.assert_array_equal(bare_grads[name], grad)


def test_dense_squared_loss_gradient(rng):
    store = _dense_store(rng)
    x = rng.standard_normal((1, 3))
    target = rng.standard_normal((1, 2))
    tape = Tape(store)
    out = tape.dense(
        tape.param('layer.W'), tape.param('layer.b'), 'identity',
        tape.constant(x),
    )
    # 0.5 * |r|^2 при log_scale = 0 плюс константа
    loss = tape.gaussian_nll(out, target, tape.constant(0.0))
    grads = backward(tape, loss)
    residual = x @ store['layer.W'].T + store['layer.b'] - target
    np.testing.assert_allclose(
        grads['layer.W'], residual.T @ x, rtol=0, atol=1e-12
    )
    np.testing.assert_allclose(
        grads['layer.b'], residual.sum(axis=0), rtol=0, atol=1e-12
    )


def test_unused_parameter_gets_zero_gradient(rng):
    store = _dense_store(rng)
    tape = Tape(store)
    tape.param('unused')
    out = tape.dense(
        tape.param('layer.W'), tape.param('layer.b'), 'tanh',
        tape.constant(np.ones((1, 3))),
    )
    loss = tape.gaussian_nll(out, np.zeros((1, 2)), tape.constant(0.0))
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads['unused'], 0.0)


def test_backward_requires_recorded_pass(rng):
    store = _dense_store(rng)
    tape = Tape(store, record=False)
    out = tape.dense(
        tape.param('layer.W'), tape.param('layer.b'), 'tanh',
        tape.constant(np.ones((1, 3))),
    )
    with pytest.raises(GraphError):
        backward(tape, out)


def test_backward_clears_tape(rng):
    store = _dense_store(rng)
    tape = Tape(store)
    out = tape.dense(
        tape.param('layer.W'), tape.param('layer.b'), 'tanh',
        tape.constant(np.ones((1, 3))),
    )
    loss = tape.gaussian_nll(out, np.zeros((1, 2)), tape.constant(0.0))
    backward(tape, loss)
    with pytest.raises(GraphError):
        backward(tape, loss)


def test_adam_first_step():
    store = ParamStore()
    store.add('w', np.array([0.0]))
    adam_update(store, {'w': np.array([4.0])}, lr=0.001)
    assert store['w'][0] == pytest.approx(-0.001, rel=1e-6), (
        'Первый шаг Adam с коррекцией смещения равен -lr * sign(g).'
    )


def test_adam_skips_frozen_tensor():
    store = ParamStore()
    store.add('w', np.array([1.5, -2.5]), trainable=False)
    before = store['w'].tobytes()
    adam_update(store, {'w': np.array([1.0, 1.0])}, lr=0.1)
    assert store['w'].tobytes() == before, (
        'Замороженный тензор должен остаться побитово неизменным.'
    )


def test_adam_converges_on_quadratic():
    store = ParamStore()
    store.add('w', np.array([0.0]))
    for _ in range(200):
        adam_update(store, {'w': 2 * (store['w'] - 3.0)}, lr=0.1)
    assert abs(store['w'][0] - 3.0) < 0.1


def test_finite_diff_check_linear_model(rng):
    store = ParamStore()
    store.add('w', rng.standard_normal(3))
    x = rng.standard_normal((5, 3))
    y = rng.standard_normal(5)

    def loss():
        return float(np.sum((x @ store['w'] - y) ** 2))

    grads = {'w': 2 * x.T @ (x @ store['w'] - y)}
    assert finite_diff_check(store, loss, grads, step=0.1) <= 1e-9
    corrupted = {'w': grads['w'] + 1.0}
    assert finite_diff_check(store, loss, corrupted, step=0.1) > 1e-2, (
        'Проверка должна обнаруживать искажённый градиент.'
    )


def test_param_store_freezing_and_checksum(rng):
    store = ParamStore()
    add_gru(store, 'gru', 2, 3, rng)
    store.add('head.W', np.ones((2, 3)))
    store.set_trainable(['gru'], False)
    assert store.trainable_names() == ['head.W']
    checksum = store.checksum(store.group('gru'))
    store['head.W'][...] = 0.0
    assert store.checksum(store.group('gru')) == checksum
    assert store.n_params() == 3 * (3 * 2 + 3 * 3 + 3) + 6
    with pytest.raises(ValidationError):
        store.set_trainable(['missing'], True)
