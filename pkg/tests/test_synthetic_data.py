import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
import app
from synthetic_data import (
    MOTION_TEMPLATES, NEW_MOTION_NAME, ForwardEmgModel, MotionTemplate, SubjectTransform, SynthConfig,
    forward_emg, forward_kinematics, gen_trajectory, gen_trials, minimum_jerk, select_templates,
    subject_transforms,
)
from signal_pipeline import EMG_CHANNELS, JOINT_NAMES, SampledSignal, rest_mask_for
from utils import ConfigError, DataValidationError


def _template(name):
    return next(t for t in MOTION_TEMPLATES if t.name == name)


def test_minimum_jerk_peak_velocity():
    duration = 2.0
    n = 1201
    path = minimum_jerk([0.0], [40.0], n)
    velocity = np.gradient(path[:, 0], duration / (n - 1))
    assert velocity.max() == pytest.approx(15.0 / 8.0 * 40.0 / duration, rel=0.01)
    assert path[0, 0] == 0.0 and path[-1, 0] == pytest.approx(40.0)
    assert np.all(np.diff(path[:, 0]) >= 0)


def test_templates():
    assert len(MOTION_TEMPLATES) == 20
    assert [t.motion_id for t in MOTION_TEMPLATES] == [f"M{i:02d}" for i in range(1, 21)]
    assert MOTION_TEMPLATES[-1].name == NEW_MOTION_NAME
    assert [t.motion_id for t in select_templates(2)] == ['M01', 'M20']
    with pytest.raises(DataValidationError):
        select_templates(1)
    with pytest.raises(DataValidationError):
        MotionTemplate('M99', 'bad', 'simple', [{'knee_flexion': 10}])


def test_trajectory_starts_and_ends_at_rest():
    config = SynthConfig()
    joints = gen_trajectory(_template('elbow_flexion'), np.random.default_rng(0), config, 1.0, 1.0)
    assert joints.rate_hz == 60.0
    assert joints.n_samples == 60 + 180 + 61
    assert_array_equal(joints.samples[:60], 0.0)
    assert_allclose(joints.samples[-61:], 0.0, atol=1e-12)
    assert joints.samples[:, 2].max() == pytest.approx(100.0, rel=1e-3)


def test_motionless_template_gives_subject_offsets():
    config = SynthConfig(noise=0.0)
    rest = MotionTemplate('M00', 'rest', 'simple', [{}])
    joints = gen_trajectory(rest, np.random.default_rng(0), config, 1.0, 1.0)
    transform = SubjectTransform.sample(np.random.default_rng(3), noise=0.0)
    emg = forward_emg(joints, ForwardEmgModel(), transform)
    assert_allclose(emg.samples, np.tile(transform.offset, (joints.n_samples, 1)), atol=1e-15)


def test_elbow_rotation_drives_only_the_pronator():
    config = SynthConfig(noise=0.0)
    joints = gen_trajectory(_template('wrist_pronation'), np.random.default_rng(0), config, 1.0, 1.0)
    emg = forward_emg(joints, ForwardEmgModel(), SubjectTransform.identity())
    pronator = EMG_CHANNELS.index('pronator_teres')
    others = [c for c in range(len(EMG_CHANNELS)) if c != pronator]
    assert_array_equal(emg.samples[:, others], 0.0)
    assert emg.samples[:, pronator].max() > 0.1


def test_faster_motion_gives_stronger_emg():
    config = SynthConfig(noise=0.0)
    template = _template('elbow_flexion')
    model = ForwardEmgModel()
    biceps = EMG_CHANNELS.index('biceps_short_head')
    peaks = []
    for timing in (1.5, 1.0, 0.5):
        joints = gen_trajectory(template, np.random.default_rng(0), config, 1.0, timing)
        peaks.append(forward_emg(joints, model, SubjectTransform.identity()).samples[:, biceps].max())
    assert peaks[0] < peaks[1] < peaks[2]


def test_emg_is_non_negative(small_trials):
    for trial in small_trials[:10]:
        assert trial.emg.samples.min() >= 0.0


def test_forward_kinematics_at_rest():
    joints = SampledSignal(np.zeros((3, 6)), 60.0, JOINT_NAMES)
    eef = forward_kinematics(joints)
    assert_allclose(eef.samples[:, :3], [[0.0, 0.0, -0.63]] * 3, atol=1e-12)
    assert_allclose(eef.samples[:, 3:], [[1.0, 0.0, 0.0, 0.0]] * 3, atol=1e-12)


def test_quaternions_are_unit_and_continuous(small_trials):
    for trial in small_trials[::9]:
        quat = trial.eef.samples[:, 3:]
        assert_allclose(np.linalg.norm(quat, axis=1), 1.0, atol=1e-12)
        assert np.all(np.sum(quat[1:] * quat[:-1], axis=1) >= 0)


def test_subject_transforms():
    transforms = subject_transforms(SynthConfig(n_subjects=3, seed=1))
    assert list(transforms) == ['S1', 'S2', 'S3']
    assert transforms['S3'].metadata['shifted']
    assert not transforms['S1'].metadata['shifted']
    for t in transforms.values():
        assert_allclose(t.mixing.sum(axis=1), 1.0)
    with pytest.raises(DataValidationError):
        SubjectTransform(np.zeros(8), np.zeros(8), np.eye(8), np.ones(8))


def test_noisy_transform_needs_a_generator():
    transform = SubjectTransform.sample(np.random.default_rng(0), noise=0.01)
    with pytest.raises(DataValidationError):
        transform.apply(np.zeros((5, 8)))


def test_generation_is_deterministic(monkeypatch):
    config = SynthConfig(n_subjects=2, n_motions=3, n_reps=2, seed=11)
    first, _ = gen_trials(config)
    monkeypatch.setitem(app.config, 'THREADS', 4)
    second, _ = gen_trials(config)
    assert [t.trial_id for t in first] == [t.trial_id for t in second]
    for a, b in zip(first, second):
        assert_array_equal(a.emg.samples, b.emg.samples)
        assert_array_equal(a.joints.samples, b.joints.samples)
    other, _ = gen_trials(SynthConfig(n_subjects=2, n_motions=3, n_reps=2, seed=12))
    assert not np.array_equal(first[0].emg.samples, other[0].emg.samples)


def test_repetitions_vary(small_trials):
    first, second = small_trials[0], small_trials[1]
    assert first.motion_id == second.motion_id and first.repetition != second.repetition
    assert first.metadata['amplitude_scale'] != second.metadata['amplitude_scale']


def test_raw_emg_carrier():
    trials, _ = gen_trials(SynthConfig(n_subjects=1, n_motions=2, n_reps=1, raw_emg=True, seed=4))
    emg = trials[0].emg
    assert emg.rate_hz == 2222.0
    assert emg.samples.min() < 0 < emg.samples.max()


def test_synth_config_validation():
    assert SynthConfig.from_dict({'n_subjects': 2}).n_subjects == 2
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({'n_motions': 25})
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({'raw_emg': True, 'emg_rate_hz': 30.0})


@pytest.mark.slow
def test_default_dataset_size():
    trials, transforms = gen_trials(SynthConfig())
    assert len(trials) == 1800
    assert len(transforms) == 5
    assert len({t.trial_id for t in trials}) == 1800


@pytest.mark.parametrize('rest_s', [1.0, 2.5])
def test_rest_lead_in_matches_the_pipeline_rest_window(rest_s):
    trials, _ = gen_trials(SynthConfig(n_subjects=1, n_motions=2, n_reps=2, rest_s=rest_s, seed=3))
    for trial in trials:
        assert trial.rest_s == rest_s
        mask = rest_mask_for(trial.joints, trial.rest_s)
        assert mask.sum() == int(round(rest_s * trial.joints.rate_hz))
        assert_array_equal(trial.joints.samples[mask], 0.0)
        assert np.any(trial.joints.samples[~mask] != 0.0)
