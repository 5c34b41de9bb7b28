import numpy as np
import pytest
from dataset_io import build_manifest
from signal_pipeline import PipelineConfig, process_dataset
from synthetic_data import SynthConfig, gen_trials


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def small_synth_config():
    """Two subjects, one trained motion plus the new motion, full 18 repetitions"""
    return SynthConfig(n_subjects=2, n_motions=2, n_reps=18, seed=7)


@pytest.fixture(scope='session')
def small_trials(small_synth_config):
    trials, _ = gen_trials(small_synth_config)
    return trials


@pytest.fixture(scope='session')
def small_manifest(small_trials):
    return build_manifest(small_trials, held_out_subject='S2', new_motion='M20')


@pytest.fixture(scope='session')
def small_dataset(small_trials):
    return process_dataset(small_trials, 'all', PipelineConfig())


def make_manifest(n_subjects=5, n_motions=20, n_reps=18, skip=()):
    """Manifest dict without trial files; skip holds (subject, motion, rep) triples to leave out"""
    subjects = [f"S{i + 1}" for i in range(n_subjects)]
    motions = [f"M{i + 1:02d}" for i in range(n_motions)]
    trials = []
    for s in subjects:
        for m in motions:
            for r in range(1, n_reps + 1):
                if (s, m, r) in skip:
                    continue
                trials.append({'trial_id': f"{s}_{m}_r{r:02d}", 'subject_id': s, 'motion_id': m,
                               'repetition': r})
    return {'trials': trials, 'subjects': subjects, 'motions': motions,
            'held_out_subject': subjects[-1], 'new_motion': motions[-1]}
