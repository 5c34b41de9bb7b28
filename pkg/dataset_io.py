"""
On-disk formats for raw trials, the dataset manifest and processed datasets.

Raw trial {trial_id}:
    {trial_id}_emg.csv, {trial_id}_joints.csv, {trial_id}_eef.csv  (column 0 is "time")
    {trial_id}.json  sidecar with subject, motion, repetition, rates and rest_s
Dataset:
    manifest.json  trial ids, subjects, motions, held-out subject and new motion
Processed dataset:
    {trial_id}_features.csv, {trial_id}_targets.csv, processed.json
"""
import os
import logging
import numpy as np
import pandas as pd
from signal_pipeline import (
    EMG_CHANNELS, EEF_NAMES, JOINT_NAMES, InputVariant, NormalizationParams,
    PipelineConfig, ProcessedDataset, ProcessedTrial, SampledSignal, TrialRecording,
)
from utils import DataValidationError, MissingArtifactError, read_json, require_file, write_json_atomic

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = 'manifest.json'
PROCESSED_FILENAME = 'processed.json'
PROCESSED_VERSION = 1
STREAMS = {
    'emg': EMG_CHANNELS,
    'joints': JOINT_NAMES,
    'eef': EEF_NAMES,
}
CSV_FLOAT_FORMAT = '%.17g'
CSV_FLOAT_PRECISION = 'round_trip'  # the default C parser can be off by an ulp
DEFAULT_RATE_HZ = 60.0


def _stream_path(directory, trial_id, stream):
    return os.path.join(directory, f"{trial_id}_{stream}.csv")


def write_signal_csv(path, signal):
    frame = pd.DataFrame(signal.samples, columns=signal.channel_names)
    frame.insert(0, 'time', signal.times)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def read_signal_csv(path, rate_hz=None, channel_names=None, what='signal CSV'):
    """SampledSignal from a CSV whose first column is time"""
    require_file(path, what)
    frame = pd.read_csv(path, float_precision=CSV_FLOAT_PRECISION)
    if frame.columns.empty or frame.columns[0] != 'time':
        raise DataValidationError(f"{path}: first column must be 'time'")
    if frame.empty:
        raise DataValidationError(f"{path}: no samples")
    times = frame['time'].to_numpy(dtype=float)
    if rate_hz is None:
        rate_hz = 1.0 / float(np.median(np.diff(times))) if len(times) > 1 else DEFAULT_RATE_HZ
    data = frame.drop(columns='time')
    if channel_names is not None:
        missing = [name for name in channel_names if name not in data.columns]
        if missing:
            raise DataValidationError(f"{path}: missing columns {missing}")
        data = data[list(channel_names)]
    return SampledSignal(data.to_numpy(dtype=float), rate_hz, list(data.columns))


def write_trial(directory, trial):
    """Write the three streams and the sidecar; returns the trial id"""
    os.makedirs(directory, exist_ok=True)
    trial_id = trial.trial_id
    for stream in STREAMS:
        write_signal_csv(_stream_path(directory, trial_id, stream), getattr(trial, stream))
    sidecar = {
        'trial_id': trial_id,
        'subject_id': trial.subject_id,
        'motion_id': trial.motion_id,
        'repetition': trial.repetition,
        'emg_rate_hz': trial.emg.rate_hz,
        'motion_rate_hz': trial.joints.rate_hz,
        'rest_s': trial.rest_s,
        'metadata': trial.metadata,
    }
    write_json_atomic(os.path.join(directory, f"{trial_id}.json"), sidecar)
    return trial_id


def read_trial(directory, trial_id):
    sidecar = read_json(os.path.join(directory, f"{trial_id}.json"), 'trial sidecar')
    emg = read_signal_csv(_stream_path(directory, trial_id, 'emg'), sidecar['emg_rate_hz'], EMG_CHANNELS,
                          'EMG stream')
    joints = read_signal_csv(_stream_path(directory, trial_id, 'joints'), sidecar['motion_rate_hz'],
                             JOINT_NAMES, 'joint stream')
    eef = read_signal_csv(_stream_path(directory, trial_id, 'eef'), sidecar['motion_rate_hz'], EEF_NAMES,
                          'EEF stream')
    return TrialRecording(
        subject_id=sidecar['subject_id'],
        motion_id=sidecar['motion_id'],
        repetition=sidecar['repetition'],
        emg=emg,
        joints=joints,
        eef=eef,
        rest_s=sidecar.get('rest_s'),
        metadata=sidecar.get('metadata') or {},
    )


def build_manifest(trials, held_out_subject=None, new_motion=None, extra=None):
    subjects = sorted({t.subject_id for t in trials})
    motions = []
    for t in trials:
        if t.motion_id not in motions:
            motions.append(t.motion_id)
    manifest = {
        'trials': [
            {'trial_id': t.trial_id, 'subject_id': t.subject_id, 'motion_id': t.motion_id,
             'repetition': t.repetition}
            for t in trials
        ],
        'subjects': subjects,
        'motions': motions,
        'held_out_subject': held_out_subject,
        'new_motion': new_motion,
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_manifest(directory, manifest):
    return write_json_atomic(os.path.join(directory, MANIFEST_FILENAME), manifest)


def read_manifest(directory):
    manifest = read_json(os.path.join(directory, MANIFEST_FILENAME), 'dataset manifest')
    if 'trials' not in manifest:
        raise DataValidationError(f"{directory}: manifest lists no trials")
    return manifest


def read_dataset(directory):
    """(manifest, [TrialRecording]) in manifest order"""
    manifest = read_manifest(directory)
    trials = [read_trial(directory, entry['trial_id']) for entry in manifest['trials']]
    logger.info(f"Read {len(trials)} trials from {directory}")
    return manifest, trials


def write_processed(directory, dataset, manifest=None):
    """Per-trial feature/target CSVs plus processed.json"""
    os.makedirs(directory, exist_ok=True)
    feature_names = dataset.feature_names
    for trial in dataset.trials.values():
        write_signal_csv(os.path.join(directory, f"{trial.trial_id}_features.csv"),
                         SampledSignal(trial.features, trial.rate_hz, feature_names))
        write_signal_csv(os.path.join(directory, f"{trial.trial_id}_targets.csv"),
                         SampledSignal(trial.targets, trial.rate_hz, EMG_CHANNELS))
        logger.debug(f"Wrote {trial.trial_id}: {trial.features.shape[0]} samples")
    payload = {
        'version': PROCESSED_VERSION,
        'variant': InputVariant(dataset.variant).value,
        'feature_names': feature_names,
        'config': dataset.config.to_dict(),
        'info': dataset.info,
        'emg_norm': {s: p.to_dict() for s, p in sorted(dataset.emg_norm.items())},
        'motion_norm': {s: p.to_dict() for s, p in sorted(dataset.motion_norm.items())},
        'trials': [
            {'trial_id': t.trial_id, 'subject_id': t.subject_id, 'motion_id': t.motion_id,
             'repetition': t.repetition, 'rate_hz': t.rate_hz}
            for t in dataset.trials.values()
        ],
        'manifest': manifest,
    }
    write_json_atomic(os.path.join(directory, PROCESSED_FILENAME), payload)
    logger.info(f"Wrote processed dataset with {len(dataset.trials)} trials to {directory}")
    return directory


def read_processed(directory):
    path = os.path.join(directory, PROCESSED_FILENAME)
    if not os.path.exists(path):
        raise MissingArtifactError(f"processed dataset not found: {directory}")
    payload = read_json(path, 'processed dataset')
    if payload.get('version') != PROCESSED_VERSION:
        raise DataValidationError(f"Unsupported processed dataset version {payload.get('version')}")
    feature_names = payload['feature_names']
    trials = {}
    for entry in payload['trials']:
        tid = entry['trial_id']
        features = read_signal_csv(os.path.join(directory, f"{tid}_features.csv"), entry['rate_hz'],
                                   feature_names, 'feature CSV')
        targets = read_signal_csv(os.path.join(directory, f"{tid}_targets.csv"), entry['rate_hz'],
                                  EMG_CHANNELS, 'target CSV')
        trials[tid] = ProcessedTrial(
            trial_id=tid,
            subject_id=entry['subject_id'],
            motion_id=entry['motion_id'],
            repetition=entry['repetition'],
            features=features.samples,
            targets=targets.samples,
            rate_hz=entry['rate_hz'],
        )
    dataset = ProcessedDataset(
        variant=InputVariant(payload['variant']),
        trials=trials,
        emg_norm={s: NormalizationParams.from_dict(p) for s, p in payload['emg_norm'].items()},
        motion_norm={s: NormalizationParams.from_dict(p) for s, p in payload['motion_norm'].items()},
        config=PipelineConfig.from_dict(payload['config']),
        info=payload.get('info') or {},
    )
    return dataset, payload.get('manifest')


def read_feature_csv(path, feature_names=None):
    """Feature matrix [T x features] from a CSV with a leading time column"""
    return read_signal_csv(path, None, feature_names, 'feature CSV')


def write_prediction_csv(path, predictions, rate_hz=60.0):
    return write_signal_csv(path, SampledSignal(predictions, rate_hz, EMG_CHANNELS))
