import pytest
from forms import (ArchitectureConfigForm, PipelineConfigForm, SynthConfigForm, TrainConfigForm, TunerConfigForm,
                   validate_config)
from utils import ConfigError


def test_defaults_fill_missing_keys():
    values = validate_config(TrainConfigForm, {})
    assert values['batch_size'] == 128
    assert values['learning_rate'] == 0.001
    assert values['shuffle'] is True


def test_numbers_are_coerced():
    values = validate_config(PipelineConfigForm, {'rms_window_ms': '150', 'savgol_window': 21.0})
    assert values['rms_window_ms'] == 150.0
    assert values['savgol_window'] == 21


def test_errors_name_the_field():
    with pytest.raises(ConfigError) as info:
        validate_config(TrainConfigForm, {'batch_size': 0, 'learning_rate': 'fast'}, 'train config')
    assert set(info.value.errors) == {'batch_size', 'learning_rate'}
    assert 'Invalid train config' in str(info.value)


def test_unknown_keys_are_ignored(caplog):
    values = validate_config(ArchitectureConfigForm, {'arch_id': 'cnn', 'colour': 'blue'})
    assert 'colour' not in values
    assert 'colour' in caplog.text


def test_savgol_window_rules():
    with pytest.raises(ConfigError):
        validate_config(PipelineConfigForm, {'savgol_window': 3, 'savgol_order': 3})
    assert validate_config(PipelineConfigForm, {'savgol_window': 5, 'savgol_order': 3})['savgol_window'] == 5


def test_tuner_budget_covers_population():
    with pytest.raises(ConfigError):
        validate_config(TunerConfigForm, {'population': 10, 'budget': 5})
    assert validate_config(TunerConfigForm, {'population': 5, 'budget': 5})['budget'] == 5


def test_synth_motion_count_bounds():
    with pytest.raises(ConfigError):
        validate_config(SynthConfigForm, {'n_motions': 21})
    assert validate_config(SynthConfigForm, {'n_motions': 2})['n_motions'] == 2
