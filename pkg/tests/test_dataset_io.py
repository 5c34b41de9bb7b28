import os
import numpy as np
import pytest
from numpy.testing import assert_array_equal
from dataset_io import (
    build_manifest, read_dataset, read_feature_csv, read_manifest, read_processed, read_signal_csv, read_trial,
    write_prediction_csv, write_processed, write_signal_csv, write_trial,
)
from signal_pipeline import SampledSignal
from synthetic_data import SynthConfig, gen_dataset
from utils import DataValidationError, MissingArtifactError


def test_signal_csv_keeps_every_bit(tmp_path, rng):
    signal = SampledSignal(rng.normal(size=(30, 3)), 60.0, ['a', 'b', 'c'])
    path = write_signal_csv(str(tmp_path / 'signal.csv'), signal)
    loaded = read_signal_csv(path)
    assert_array_equal(loaded.samples, signal.samples)
    assert loaded.rate_hz == pytest.approx(60.0)
    assert loaded.channel_names == ['a', 'b', 'c']
    assert read_signal_csv(path, channel_names=['c', 'a']).channel_names == ['c', 'a']
    with pytest.raises(DataValidationError):
        read_signal_csv(path, channel_names=['d'])


def test_signal_csv_needs_time_column(tmp_path):
    path = tmp_path / 'bad.csv'
    path.write_text('a,b\n1,2\n')
    with pytest.raises(DataValidationError):
        read_signal_csv(str(path))
    with pytest.raises(MissingArtifactError):
        read_signal_csv(str(tmp_path / 'absent.csv'))


def test_single_row_falls_back_to_default_rate(tmp_path):
    path = tmp_path / 'one.csv'
    path.write_text('time,a\n0,1.5\n')
    assert read_signal_csv(str(path)).rate_hz == 60.0


def test_trial_round_trip(tmp_path, small_trials):
    trial = small_trials[3]
    write_trial(str(tmp_path), trial)
    loaded = read_trial(str(tmp_path), trial.trial_id)
    assert loaded.trial_id == trial.trial_id
    assert loaded.rest_s == trial.rest_s
    for stream in ('emg', 'joints', 'eef'):
        assert_array_equal(getattr(loaded, stream).samples, getattr(trial, stream).samples)
    assert loaded.metadata['motion_name'] == trial.metadata['motion_name']


def test_generated_dataset_reads_back(tmp_path):
    config = SynthConfig(n_subjects=2, n_motions=2, n_reps=2, seed=5)
    manifest = gen_dataset(str(tmp_path), config)
    assert manifest['held_out_subject'] == 'S2'
    assert manifest['new_motion'] == 'M20'
    assert manifest['motion_names'] == {'M01': 'shoulder_flexion', 'M20': 'pointing_three_points'}
    assert read_manifest(str(tmp_path))['synth_config'] == config.to_dict()
    read_back, trials = read_dataset(str(tmp_path))
    assert [t.trial_id for t in trials] == [e['trial_id'] for e in read_back['trials']]
    assert len(trials) == 8


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_manifest(str(tmp_path))


def test_processed_round_trip(tmp_path, small_dataset, small_manifest):
    write_processed(str(tmp_path), small_dataset, small_manifest)
    loaded, manifest = read_processed(str(tmp_path))
    assert manifest == small_manifest
    assert loaded.variant == small_dataset.variant
    assert set(loaded.trials) == set(small_dataset.trials)
    tid = sorted(small_dataset.trials)[5]
    assert_array_equal(loaded.trials[tid].features, small_dataset.trials[tid].features)
    assert_array_equal(loaded.trials[tid].targets, small_dataset.trials[tid].targets)
    assert_array_equal(loaded.emg_norm['S1'].maximum, small_dataset.emg_norm['S1'].maximum)
    assert loaded.info == small_dataset.info


def test_missing_processed_dataset(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_processed(str(tmp_path))


def test_prediction_and_feature_csv(tmp_path, rng):
    predictions = rng.uniform(size=(12, 8))
    path = write_prediction_csv(str(tmp_path / 'pred.csv'), predictions)
    assert_array_equal(read_signal_csv(path).samples, predictions)
    features = SampledSignal(rng.uniform(size=(12, 2)), 60.0, ['x', 'y'])
    feature_path = write_signal_csv(str(tmp_path / 'features.csv'), features)
    assert_array_equal(read_feature_csv(feature_path, ['x', 'y']).samples, features.samples)
    assert os.path.exists(feature_path)


def test_build_manifest_keeps_motion_order(small_trials):
    manifest = build_manifest(small_trials, 'S2', 'M20', extra={'note': 'x'})
    assert manifest['motions'] == ['M01', 'M20']
    assert manifest['subjects'] == ['S1', 'S2']
    assert manifest['note'] == 'x'
    assert len(manifest['trials']) == len(small_trials)


def test_hard_to_parse_doubles_read_back_exactly(tmp_path):
    values = np.array([[0.1 + 0.2, np.nextafter(1.0, 2.0)], [1e-300 / 3.0, -2.0 / 3.0], [np.pi * 1e17, 5e-324]])
    path = write_signal_csv(str(tmp_path / 'hard.csv'), SampledSignal(values, 60.0, ['a', 'b']))
    assert_array_equal(read_signal_csv(path).samples, values)
