import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from architectures import (
    ArchitectureConfig, ArchitectureId, CnnModel, FnnModel, RnnModel, build_cnn, build_fnn, build_fnnseq,
    build_model, build_rnn, build_rnnseq_pair, load_model, make_lagged_features, make_subsequences,
    receptive_field, save_model, warmup_lags,
)
import nn_engine
from nn_engine import TrainConfig
from utils import ConfigError, DataValidationError, ShapeError


@pytest.mark.parametrize('builder, expected', [
    (build_rnn, 528648),
    (build_fnn, 174984),
    (build_fnnseq, 211848),
    (build_cnn, 435272),
])
def test_param_counts_for_full_motion_input(builder, expected):
    assert builder(18).param_count() == expected


def test_rnnseq_param_count():
    model, _ = build_rnnseq_pair(18)
    assert model.param_count() == 4 * 128 * (18 + 128 + 1) + 128 * 8 + 8


def test_warmup_lags():
    assert warmup_lags(3) == [8, 4, 2, 1]
    assert warmup_lags(0) == [1]


def test_subsequence_rows():
    features = np.arange(40, dtype=float).reshape(20, 2)
    subs = make_subsequences(features, None, k=3)
    assert len(subs) == 20
    assert_array_equal(subs[10].inputs, features[[2, 6, 8, 9, 10]])
    assert subs[10].lags == [8, 4, 2, 1]
    assert_array_equal(subs[0].inputs, features[[0]])
    assert_array_equal(subs[3].inputs, features[[1, 2, 3]])


def test_subsequences_carry_targets():
    features = np.zeros((5, 2))
    targets = np.arange(40, dtype=float).reshape(5, 8)
    subs = make_subsequences(features, targets, k=1)
    assert_array_equal(subs[4].target_output, targets[4])
    with pytest.raises(ShapeError):
        make_subsequences(features, targets[:3], k=1)


def test_lagged_features_rows():
    features = np.arange(30, dtype=float).reshape(15, 2)
    lagged = make_lagged_features(features, (1, 2, 4, 8))
    assert lagged.shape == (15, 10)
    assert_array_equal(lagged[9], features[[9, 8, 7, 5, 1]].ravel())
    # lags before the start clamp to the first row
    assert_array_equal(lagged[0], np.tile(features[0], 5))


def test_fnn_is_pointwise(rng):
    model = build_fnn(6, dense_units=(16, 8))
    features = rng.uniform(-1, 1, size=(30, 6))
    order = rng.permutation(30)
    assert_allclose(model.predict(features[order]), model.predict(features)[order], atol=1e-12)


def test_fnnseq_prediction_shape(rng):
    model = build_fnnseq(6, dense_units=(16,))
    assert model.input_width == 30
    assert model.predict(rng.uniform(-1, 1, size=(25, 6))).shape == (25, 8)


def test_cnn_receptive_field_window(rng):
    model = build_cnn(18)
    assert model.receptive_field == 52 == receptive_field((32, 8, 8, 4, 4))
    features = rng.uniform(-1, 1, size=(150, 18))
    base = model.predict(features)
    t0 = 70
    perturbed = features.copy()
    perturbed[t0] += 0.5
    changed = model.predict(perturbed)
    assert_array_equal(changed[:t0 - 28], base[:t0 - 28])
    assert_array_equal(changed[t0 + 24:], base[t0 + 24:])
    assert not np.array_equal(changed[t0 - 28:t0 + 24], base[t0 - 28:t0 + 24])


def test_cnn_rejects_short_sequences(rng):
    model = build_cnn(18)
    with pytest.raises(DataValidationError, match='sequence too short for CNN'):
        model.predict(rng.uniform(size=(31, 18)))
    with pytest.raises(DataValidationError):
        model.batch_source([(np.zeros((10, 18)), np.zeros((10, 8)))])


def test_rnn_prediction_is_reset_between_calls(rng):
    model = build_rnn(6, lstm_units=(8, 4))
    features = rng.uniform(-1, 1, size=(20, 6))
    first = model.predict(features)
    assert first.shape == (20, 8)
    assert_array_equal(model.predict(features), first)


def test_rnn_trains_on_single_unshuffled_sequences():
    model = build_rnn(6, lstm_units=(8,))
    adjusted = model.adjust_train_config(TrainConfig(batch_size=64, shuffle=True))
    assert adjusted.batch_size == 1 and not adjusted.shuffle
    source = model.batch_source([(np.zeros((5, 6)), np.zeros((5, 8)))] * 3)
    assert [x.shape[0] for x, _ in source.batches(batch_size=64)] == [1, 1, 1]


def test_rnnseq_online_matches_offline(rng):
    model, predictor = build_rnnseq_pair(4, rnnseq_units=8, warmup_k=3)
    features = rng.uniform(-1, 1, size=(40, 4))
    offline = model.predict(features)
    online = predictor.run(features)
    assert_allclose(online, offline, atol=1e-12)
    assert_allclose(model.predict_online(features), offline, atol=1e-12)


def test_online_step_is_one_lstm_step(rng, monkeypatch):
    _, predictor = build_rnnseq_pair(3, rnnseq_units=4, warmup_k=3)
    calls = []
    cell = nn_engine._lstm_cell

    def counting_cell(*args):
        calls.append(1)
        return cell(*args)

    monkeypatch.setattr(nn_engine, '_lstm_cell', counting_cell)
    predictor.run(rng.uniform(size=(100, 3)))
    assert predictor.steps_fed == 100
    assert len(calls) == 100


def test_warm_up_matches_training_network(rng):
    model, predictor = build_rnnseq_pair(4, rnnseq_units=6, warmup_k=3)
    features = rng.uniform(-1, 1, size=(20, 4))
    for sub in make_subsequences(features, None, k=3)[::3]:
        expected = model.network.forward(sub.inputs[None, :, :])[0]
        assert_allclose(predictor.warm_up(sub), expected, atol=1e-12)


def test_online_state_carries_across_rows(rng):
    _, predictor = build_rnnseq_pair(3, rnnseq_units=4, warmup_k=2)
    row = rng.uniform(size=3)
    predictor.reset()
    first = predictor.step(row)
    second = predictor.step(row)
    assert not np.allclose(first, second)


def test_online_predictor_reset_makes_runs_independent(rng):
    _, predictor = build_rnnseq_pair(3, rnnseq_units=4, warmup_k=2)
    features = rng.uniform(size=(12, 3))
    first = predictor.run(features)
    predictor.step(rng.uniform(size=3))
    predictor.reset()
    assert_array_equal(np.vstack([predictor.step(row) for row in features]), first)


def test_rnnseq_batch_source_holds_one_pair_per_timestep():
    model, _ = build_rnnseq_pair(2, rnnseq_units=4, warmup_k=2)
    source = model.batch_source([(np.zeros((7, 2)), np.zeros((7, 8))), (np.zeros((3, 2)), np.zeros((3, 8)))])
    assert len(source) == 10


def test_architecture_config_round_trip():
    config = ArchitectureConfig('cnn', 7, input_dropout=0.2, cnn_filters=(4, 4), cnn_kernels=(3, 2))
    assert ArchitectureConfig.from_dict(config.to_dict()) == config


def test_architecture_config_validation():
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_dict({'arch_id': 'transformer'})
    with pytest.raises(ConfigError):
        ArchitectureConfig.from_dict({'input_dropout': 1.0})
    with pytest.raises(DataValidationError):
        ArchitectureConfig('cnn', 18, cnn_filters=(4,), cnn_kernels=(3, 3))
    with pytest.raises(DataValidationError):
        ArchitectureConfig('fnnseq', 18, lags=(4, 2))


def test_model_class_checks_architecture():
    with pytest.raises(DataValidationError):
        RnnModel(ArchitectureConfig(ArchitectureId.FNN, 6))


def test_models_check_feature_width(rng):
    model = build_fnn(6, dense_units=(4,))
    with pytest.raises(ShapeError):
        model.predict(rng.uniform(size=(5, 7)))


@pytest.mark.parametrize('arch_id', ['rnn', 'rnnseq', 'fnn', 'fnnseq', 'cnn'])
def test_save_and_load_model(tmp_path, rng, arch_id):
    config = ArchitectureConfig(arch_id, 5, lstm_units=(6,), rnnseq_units=6, dense_units=(6,),
                                cnn_filters=(6,), cnn_kernels=(3,), warmup_k=2)
    model = build_model(config, seed=3)
    path = str(tmp_path / 'weights.json')
    save_model(path, model, {'regime': 'general'})
    loaded, header = load_model(path)
    assert header['regime'] == 'general'
    assert loaded.config == config
    assert type(loaded) is type(model)
    features = rng.uniform(-1, 1, size=(12, 5))
    assert_array_equal(loaded.predict(features), model.predict(features))


def test_build_model_accepts_dicts():
    model = build_model({'arch_id': 'fnn', 'feature_width': 3, 'dense_units': [4]})
    assert isinstance(model, FnnModel)
    assert not isinstance(model, CnnModel)
