import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
import nn_engine
from nn_engine import (
    EarlyStopping, LayerKind, LayerSpec, LstmState, Network, NetworkParams, SampleBatches, SequenceBatches,
    TrainConfig, adam_step, conv1d_forward, dropout, evaluate_loss, fit, init_weights, load_params, lstm_sequence,
    lstm_step, mse_loss, save_params,
)
from utils import ConfigError, DataValidationError, ShapeError


def analytic_grads(network, x, y):
    pred = network.forward(x)
    _, grad = mse_loss(pred, y)
    dx = network.backward(grad)
    return {name: g.copy() for name, g in network.gradients().items()}, dx


def loss_at(network, params, x, y):
    network.set_params(params)
    network.reset_states()
    loss, _ = mse_loss(network.forward(x), y)
    return loss


def check_gradients(network, x, y, n_entries=6, eps=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    base = network.get_params()
    grads, _ = analytic_grads(network, x, y)
    for name in base.names:
        for _ in range(n_entries):
            index = tuple(rng.integers(0, dim) for dim in base[name].shape)
            plus = base.copy()
            plus.tensors[name][index] += eps
            minus = base.copy()
            minus.tensors[name][index] -= eps
            numeric = (loss_at(network, plus, x, y) - loss_at(network, minus, x, y)) / (2 * eps)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-8), name
    network.set_params(base)


def check_input_gradient(network, x, y, eps=1e-6):
    _, dx = analytic_grads(network, x, y)
    params = network.get_params()
    for index in [(0, 0, 0), (0, x.shape[1] // 2, x.shape[2] - 1), (x.shape[0] - 1, x.shape[1] - 1, 0)]:
        plus = x.copy()
        plus[index] += eps
        minus = x.copy()
        minus[index] -= eps
        numeric = (loss_at(network, params, plus, y) - loss_at(network, params, minus, y)) / (2 * eps)
        assert dx[index] == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_dense_gradients(rng):
    network = Network([LayerSpec.dense(7, 'relu'), LayerSpec.dense(3, 'linear')], 5, seed=1)
    x = rng.normal(size=(11, 5))
    y = rng.normal(size=(11, 3))
    check_gradients(network, x, y)


def test_time_distributed_dense_gradients(rng):
    network = Network([LayerSpec.time_distributed(4)], 3, seed=2)
    x = rng.normal(size=(2, 6, 3))
    y = rng.normal(size=(2, 6, 4))
    check_gradients(network, x, y)
    check_input_gradient(network, x, y)


def test_lstm_gradients_over_five_steps(rng):
    network = Network([LayerSpec.lstm(3, return_sequences=True), LayerSpec.time_distributed(2)], 4, seed=3)
    x = rng.normal(size=(2, 5, 4))
    y = rng.normal(size=(2, 5, 2))
    check_gradients(network, x, y)
    check_input_gradient(network, x, y)


def test_lstm_last_step_gradients(rng):
    network = Network([LayerSpec.lstm(3), LayerSpec.dense(2, 'linear')], 2, seed=4)
    x = rng.normal(size=(3, 5, 2))
    y = rng.normal(size=(3, 2))
    check_gradients(network, x, y)


def test_conv1d_gradients(rng):
    network = Network([LayerSpec.conv1d(3, 4, 'linear'), LayerSpec.time_distributed(2)], 2, seed=5)
    x = rng.normal(size=(2, 9, 2))
    y = rng.normal(size=(2, 9, 2))
    check_gradients(network, x, y)
    check_input_gradient(network, x, y)


def test_conv1d_matches_same_padded_correlation(rng):
    for k in (1, 2, 3, 4, 7):
        x = rng.normal(size=(2, 10, 3))
        kernel = rng.normal(size=(k, 3, 5))
        bias = rng.normal(size=5)
        out, _ = conv1d_forward(x, kernel, bias, 'linear')
        left = (k - 1) // 2
        padded = np.pad(x, ((0, 0), (left, k - 1 - left), (0, 0)))
        expected = np.zeros((2, 10, 5))
        for t in range(10):
            for j in range(k):
                expected[:, t, :] += padded[:, t + j, :] @ kernel[j]
        assert_allclose(out, expected + bias, atol=1e-12)


def test_conv1d_rejects_kernel_longer_than_sequence():
    with pytest.raises(DataValidationError):
        conv1d_forward(np.zeros((1, 3, 2)), np.zeros((5, 2, 1)), np.zeros(1))


def test_lstm_with_zero_weights_outputs_zeros(rng):
    params = {'W': np.zeros((3, 8)), 'U': np.zeros((2, 8)), 'b': np.zeros(8)}
    hs, state = lstm_sequence(rng.normal(size=(4, 7, 3)), params)
    assert_array_equal(hs, 0.0)
    assert_array_equal(state.cell, 0.0)


def test_lstm_step_unrolls_to_lstm_sequence(rng):
    params = init_weights([LayerSpec.lstm(4)], 3, seed=9)
    p = {key: params[f"00_lstm/{key}"] for key in ('W', 'U', 'b')}
    x = rng.normal(size=(2, 6, 3))
    state = LstmState.zeros(2, 4)
    steps = []
    for t in range(6):
        h, state = lstm_step(x[:, t, :], state, p)
        steps.append(h)
    hs, final = lstm_sequence(x, p)
    assert_allclose(np.stack(steps, axis=1), hs, atol=1e-15)
    assert_allclose(final.cell, state.cell, atol=1e-15)


def test_stateful_lstm_split_equals_full_pass(rng):
    network = Network([LayerSpec.lstm(4, stateful=True, return_sequences=True)], 3, seed=6)
    x = rng.normal(size=(1, 12, 3))
    first = network.forward(x[:, :5])
    second = network.forward(x[:, 5:])
    network.reset_states()
    full = network.forward(x)
    assert_allclose(np.concatenate([first, second], axis=1), full, atol=1e-14)
    assert network.stateful


def test_stateful_lstm_rejects_batch_change(rng):
    network = Network([LayerSpec.lstm(2, stateful=True)], 3, seed=0)
    network.forward(rng.normal(size=(1, 4, 3)))
    with pytest.raises(ShapeError):
        network.forward(rng.normal(size=(2, 4, 3)))
    network.reset_states()
    assert network.forward(rng.normal(size=(2, 4, 3))).shape == (2, 2)


def test_reset_states_gives_independent_passes(rng):
    network = Network([LayerSpec.lstm(3, stateful=True, return_sequences=True)], 2, seed=0)
    x = rng.normal(size=(1, 8, 2))
    first = network.forward(x)
    network.reset_states()
    assert_array_equal(network.forward(x), first)


def test_dropout_is_identity_at_inference(rng):
    x = rng.normal(size=(50, 4))
    assert dropout(x, 0.5, training=False) is x
    dropped = dropout(x, 0.5, training=True, rng=np.random.default_rng(0))
    kept = dropped != 0
    assert_allclose(dropped[kept], 2.0 * x[kept])
    with pytest.raises(DataValidationError):
        dropout(x, 0.5, training=True)


def test_adam_first_step_moves_by_learning_rate(rng):
    config = TrainConfig(learning_rate=0.01)
    theta = rng.normal(size=5)
    g = rng.normal(size=5)
    new, moments = adam_step({'p': theta}, {'p': g}, {}, 1, config)
    assert_allclose(new['p'], theta - 0.01 * g / (np.abs(g) + config.epsilon), rtol=1e-12)
    m, v = moments['p']
    assert_allclose(m, 0.1 * g)
    assert_allclose(v, 0.001 * g * g)


def test_adam_minimizes_a_quadratic():
    config = TrainConfig(learning_rate=0.1)
    params = {'p': np.array([3.0, -2.0])}
    moments = {}
    for t in range(1, 501):
        params, moments = adam_step(params, {'p': 2 * params['p']}, moments, t, config)
    assert np.all(np.abs(params['p']) < 0.05)


def test_early_stopping_trace():
    stopper = EarlyStopping(patience=5)
    losses = [1.0, 0.9, 0.8, 0.81, 0.82, 0.83, 0.84, 0.85]
    stops = [stopper.update(epoch, loss) for epoch, loss in enumerate(losses, start=1)]
    assert stops == [False] * 7 + [True]
    assert stopper.best_epoch == 3
    assert stopper.best_loss == 0.8


def test_early_stopping_rejects_zero_patience():
    with pytest.raises(DataValidationError):
        EarlyStopping(0)


def _regression_data(seed=0, n=64):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    y = np.tanh(x @ rng.normal(size=(4, 2)))
    return SampleBatches(x, y)


def test_fit_is_deterministic():
    config = TrainConfig(batch_size=16, max_epochs=5, learning_rate=0.01, seed=3)
    results = []
    for _ in range(2):
        network = Network([LayerSpec.dense(8), LayerSpec.dropout(0.2), LayerSpec.dense(2, 'linear')], 4, seed=11)
        params, history = fit(network, _regression_data(0), _regression_data(1), config)
        results.append((params, history))
    assert results[0][0].equals(results[1][0])
    assert results[0][1] == results[1][1]


def test_fit_restores_best_weights_and_lowers_loss():
    config = TrainConfig(batch_size=16, max_epochs=30, patience=3, learning_rate=0.01, seed=0)
    network = Network([LayerSpec.dense(8), LayerSpec.dense(2, 'linear')], 4, seed=1)
    train, val = _regression_data(0), _regression_data(1)
    initial = evaluate_loss(network, val)
    _, history = fit(network, train, val, config)
    best = min(h['val_loss'] for h in history)
    assert evaluate_loss(network, val) == pytest.approx(best, rel=1e-12)
    assert best < initial
    assert [h['epoch'] for h in history] == list(range(1, len(history) + 1))


def test_fit_stops_on_scripted_plateau_and_restores_epoch_3(monkeypatch):
    scripted = iter([1.0, 0.9, 0.8, 0.81, 0.82, 0.83, 0.84, 0.85, 0.86, 0.87])
    monkeypatch.setattr(nn_engine, 'evaluate_loss', lambda network, source, batch_size=128: next(scripted))
    network = Network([LayerSpec.dense(8), LayerSpec.dense(2, 'linear')], 4, seed=1)
    snapshots = {}

    def remember(epoch, val_loss):
        snapshots[epoch] = network.get_params()
        return False

    config = TrainConfig(batch_size=16, max_epochs=10, patience=5, learning_rate=0.01, seed=0)
    params, history = fit(network, _regression_data(0), _regression_data(1), config, on_epoch_end=remember)
    assert [h['epoch'] for h in history] == list(range(1, 9))
    assert [h['val_loss'] for h in history] == [1.0, 0.9, 0.8, 0.81, 0.82, 0.83, 0.84, 0.85]
    assert params.equals(snapshots[3])
    assert not params.equals(snapshots[8])


def test_fit_with_zero_epochs_returns_initial_weights():
    network = Network([LayerSpec.dense(3)], 4, seed=2)
    initial = network.get_params()
    params, history = fit(network, _regression_data(0), _regression_data(1), TrainConfig(max_epochs=0))
    assert history == []
    assert params.equals(initial)


def test_fit_callback_can_stop_training():
    network = Network([LayerSpec.dense(2, 'linear')], 4, seed=2)
    _, history = fit(network, _regression_data(0), _regression_data(1),
                     TrainConfig(max_epochs=10, learning_rate=0.01), on_epoch_end=lambda epoch, loss: epoch == 2)
    assert len(history) == 2


def test_fit_rejects_empty_data():
    network = Network([LayerSpec.dense(2)], 4)
    with pytest.raises(DataValidationError):
        fit(network, SampleBatches(np.zeros((0, 4)), np.zeros((0, 2))), _regression_data(), TrainConfig())


def test_sequence_batches_group_equal_lengths():
    sequences = [(np.zeros((n, 2)), np.zeros((n, 1))) for n in (5, 3, 5, 3, 5)]
    shapes = [x.shape for x, _ in SequenceBatches(sequences).batches(batch_size=2)]
    assert shapes == [(2, 5, 2), (2, 3, 2), (1, 5, 2)]
    capped = [x.shape[0] for x, _ in SequenceBatches(sequences, max_batch=1).batches(batch_size=4)]
    assert capped == [1] * 5


def test_sequence_batches_keep_order_when_shuffle_disallowed():
    sequences = [(np.full((3, 1), i), np.zeros((3, 1))) for i in range(4)]
    source = SequenceBatches(sequences, allow_shuffle=False, max_batch=1)
    order = [int(x[0, 0, 0]) for x, _ in source.batches(np.random.default_rng(0), 1, shuffle=True)]
    assert order == [0, 1, 2, 3]


def test_mse_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


def test_param_counts():
    assert Network([LayerSpec.dense(8, 'linear')], 18).param_count() == 152
    assert Network([LayerSpec.lstm(4)], 3).param_count() == 4 * 4 * (3 + 4 + 1)
    assert Network([LayerSpec.conv1d(5, 3)], 2).param_count() == 3 * 2 * 5 + 5


def test_lstm_forget_bias_starts_at_one():
    params = init_weights([LayerSpec.lstm(3)], 2, seed=0)
    assert_array_equal(params['00_lstm/b'], [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0])


def test_set_params_verifies_names_and_shapes():
    network = Network([LayerSpec.dense(3)], 4)
    params = network.get_params()
    with pytest.raises(ShapeError):
        network.set_params(NetworkParams({'00_dense/W': params['00_dense/W']}))
    with pytest.raises(ShapeError):
        network.set_params(NetworkParams({'00_dense/W': np.zeros((3, 3)), '00_dense/b': np.zeros(3)}))


def test_layer_spec_validation():
    with pytest.raises(DataValidationError):
        LayerSpec.dropout(1.0)
    with pytest.raises(DataValidationError):
        LayerSpec(LayerKind.CONV1D, units=4)
    with pytest.raises(DataValidationError):
        LayerSpec.dense(0)
    with pytest.raises(DataValidationError):
        LayerSpec.dense(4, 'tanh')
    spec = LayerSpec.conv1d(8, 3)
    assert LayerSpec.from_dict(spec.to_dict()) == spec


def test_train_config_from_dict():
    assert TrainConfig.from_dict({'batch_size': 32}).batch_size == 32
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'learning_rate': 0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'beta1': 1.0})


def test_weight_files_are_bit_exact(tmp_path):
    network = Network([LayerSpec.lstm(3, return_sequences=True), LayerSpec.time_distributed(2)], 4, seed=7)
    params = network.get_params()
    first = tmp_path / 'a.json'
    second = tmp_path / 'b.json'
    save_params(str(first), params, {'arch_id': 'rnn'})
    loaded, header = load_params(str(first))
    assert loaded.equals(params)
    assert header == {'arch_id': 'rnn'}
    save_params(str(second), loaded, header)
    assert first.read_bytes() == second.read_bytes()


def test_load_params_rejects_foreign_files(tmp_path):
    path = tmp_path / 'other.json'
    path.write_text('{"format": "something-else", "version": 1}')
    with pytest.raises(DataValidationError):
        load_params(str(path))
