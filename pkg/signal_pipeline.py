"""
Preprocessing pipeline: raw trial streams to aligned, normalized 60 Hz
feature and target sequences.

EMG:    baseline_correct -> remove_outliers -> rms_envelope -> [0, 1] normalization
Motion: savgol_smooth -> forward_difference (once, twice) -> [-1, 1] normalization

Every operation is a pure function of its arguments.
"""
import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import savgol_filter
from app import config as app_config
from forms import PipelineConfigForm, validate_config
from utils import DataValidationError, ShapeError

logger = logging.getLogger(__name__)

JOINT_NAMES = [
    'shoulder_abduction', 'shoulder_flexion', 'elbow_flexion',
    'elbow_rotation', 'wrist_abduction', 'wrist_flexion',
]
EMG_CHANNELS = [
    'deltoid_posterior', 'deltoid_medial', 'deltoid_anterior', 'biceps_short_head',
    'triceps_lateral_head', 'extensor_carpi_radialis', 'pronator_teres', 'flexor_carpi_ulnaris',
]
EEF_NAMES = ['pos_x', 'pos_y', 'pos_z', 'quat_w', 'quat_x', 'quat_y', 'quat_z']

ANGLE_COLUMNS = list(JOINT_NAMES)
VELOCITY_COLUMNS = [f"{name}_vel" for name in JOINT_NAMES]
ACCELERATION_COLUMNS = [f"{name}_acc" for name in JOINT_NAMES]
EEF_COLUMNS = list(EEF_NAMES)
EEF_VELOCITY_COLUMNS = [f"{name}_vel" for name in EEF_NAMES]
EEF_ACCELERATION_COLUMNS = [f"{name}_acc" for name in EEF_NAMES]

# Column order of the per-trial motion table
MOTION_COLUMNS = (ANGLE_COLUMNS + VELOCITY_COLUMNS + ACCELERATION_COLUMNS
                  + EEF_COLUMNS + EEF_VELOCITY_COLUMNS + EEF_ACCELERATION_COLUMNS)

EMG_RANGE = (0.0, 1.0)
MOTION_RANGE = (-1.0, 1.0)
DEGENERATE_SPAN = 1e-9


class InputVariant(str, enum.Enum):
    ALL = 'all'
    ANG = 'ang'
    VEL = 'vel'
    ACC = 'acc'
    EEF = 'eef'
    EEF_PLUS = 'eefplus'


VARIANT_COLUMNS = {
    InputVariant.ALL: ANGLE_COLUMNS + VELOCITY_COLUMNS + ACCELERATION_COLUMNS,
    InputVariant.ANG: ANGLE_COLUMNS,
    InputVariant.VEL: VELOCITY_COLUMNS,
    InputVariant.ACC: ACCELERATION_COLUMNS,
    InputVariant.EEF: EEF_COLUMNS,
    InputVariant.EEF_PLUS: EEF_COLUMNS + EEF_VELOCITY_COLUMNS + EEF_ACCELERATION_COLUMNS,
}


@dataclass
class InputConfig:
    variant: InputVariant = InputVariant.ALL

    def __post_init__(self):
        try:
            self.variant = InputVariant(self.variant)
        except ValueError as exc:
            raise DataValidationError(f"Unknown input variant: {self.variant}") from exc

    @property
    def columns(self):
        return list(VARIANT_COLUMNS[self.variant])

    @property
    def feature_width(self):
        return len(VARIANT_COLUMNS[self.variant])


@dataclass
class PipelineConfig:
    rms_window_ms: float = 200.0
    out_rate_hz: float = 60.0
    savgol_window: int = 31
    savgol_order: int = 3
    outlier_k_sigma: float = 6.0
    rest_s: float = 1.0
    normalization_scope: str = 'train'

    @classmethod
    def from_dict(cls, data):
        return cls(**validate_config(PipelineConfigForm, data, 'pipeline config'))

    def to_dict(self):
        return asdict(self)


@dataclass
class SampledSignal:
    """Samples [time x channels] at a fixed rate"""
    samples: np.ndarray
    rate_hz: float
    channel_names: list = field(default_factory=list)

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2:
            raise ShapeError(f"Signal must be 2-D [time x channels], got shape {samples.shape}")
        if not self.rate_hz or self.rate_hz <= 0:
            raise DataValidationError(f"Sample rate must be positive, got {self.rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise DataValidationError("Signal contains NaN or Inf")
        names = list(self.channel_names) or [f"ch{i + 1}" for i in range(samples.shape[1])]
        if len(names) != samples.shape[1]:
            raise ShapeError(f"{len(names)} channel names for {samples.shape[1]} channels")
        self.samples = samples
        self.rate_hz = float(self.rate_hz)
        self.channel_names = names

    @property
    def n_samples(self):
        return self.samples.shape[0]

    @property
    def n_channels(self):
        return self.samples.shape[1]

    @property
    def times(self):
        return np.arange(self.n_samples) / self.rate_hz

    def replace(self, samples, rate_hz=None, channel_names=None):
        return SampledSignal(samples, rate_hz or self.rate_hz,
                             self.channel_names if channel_names is None else channel_names)

    def select(self, names):
        missing = [name for name in names if name not in self.channel_names]
        if missing:
            raise ShapeError(f"Signal has no channels {missing}")
        idx = [self.channel_names.index(name) for name in names]
        return SampledSignal(self.samples[:, idx], self.rate_hz, list(names))

    def truncate(self, n):
        return SampledSignal(self.samples[:n], self.rate_hz, self.channel_names)


@dataclass
class TrialRecording:
    """One repetition of one motion by one subject"""
    subject_id: str
    motion_id: str
    repetition: int
    emg: SampledSignal
    joints: SampledSignal
    eef: SampledSignal
    rest_s: float = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.emg.n_channels != len(EMG_CHANNELS):
            raise ShapeError(f"EMG must have {len(EMG_CHANNELS)} channels, got {self.emg.n_channels}")
        if self.joints.n_channels != len(JOINT_NAMES):
            raise ShapeError(f"Joints must have {len(JOINT_NAMES)} channels, got {self.joints.n_channels}")
        if self.eef.n_channels != len(EEF_NAMES):
            raise ShapeError(f"EEF must have {len(EEF_NAMES)} channels, got {self.eef.n_channels}")
        if int(self.repetition) < 1:
            raise DataValidationError(f"Repetition must be >= 1, got {self.repetition}")
        self.repetition = int(self.repetition)

    @property
    def trial_id(self):
        return trial_id_for(self.subject_id, self.motion_id, self.repetition)


def trial_id_for(subject_id, motion_id, repetition):
    return f"{subject_id}_{motion_id}_r{int(repetition):02d}"


@dataclass
class NormalizationParams:
    minimum: np.ndarray
    maximum: np.ndarray
    target_range: tuple
    channel_names: list

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=float)
        self.maximum = np.asarray(self.maximum, dtype=float)
        self.target_range = tuple(float(v) for v in self.target_range)
        self.channel_names = list(self.channel_names)
        if self.minimum.shape != self.maximum.shape or self.minimum.ndim != 1:
            raise ShapeError("Normalization min and max must be matching vectors")
        if np.any(self.maximum < self.minimum):
            raise DataValidationError("Normalization max below min")
        if self.target_range not in (EMG_RANGE, MOTION_RANGE):
            raise DataValidationError(f"Unsupported target range {self.target_range}")

    def to_dict(self):
        return {
            'minimum': self.minimum.tolist(),
            'maximum': self.maximum.tolist(),
            'target_range': list(self.target_range),
            'channel_names': self.channel_names,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(data['minimum'], data['maximum'], tuple(data['target_range']), data['channel_names'])


def baseline_correct(signal, rest_mask):
    """Subtract the per-channel mean over the rest samples"""
    rest_mask = np.asarray(rest_mask, dtype=bool)
    if rest_mask.shape != (signal.n_samples,):
        raise ShapeError(f"Rest mask length {rest_mask.shape} does not match {signal.n_samples} samples")
    if not rest_mask.any():
        raise DataValidationError("no rest baseline")
    baseline = signal.samples[rest_mask].mean(axis=0)
    return signal.replace(signal.samples - baseline)


def _flagged_runs(flags):
    """(start, stop) of each contiguous run of True, stop exclusive"""
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[0::2], edges[1::2]))


def _spline_fill(column, flags, n_anchor=2):
    filled = column.copy()
    good = np.flatnonzero(~flags)
    for start, stop in _flagged_runs(flags):
        left = good[good < start][-n_anchor:]
        right = good[good >= stop][:n_anchor]
        anchors = np.concatenate([left, right])
        idx = np.arange(start, stop)
        if anchors.size == 1:
            spline_values = np.full(idx.size, column[anchors[0]])
        else:
            spline_values = CubicSpline(anchors, column[anchors])(idx)
        artifact = column[idx] - spline_values
        filled[idx] = column[idx] - artifact
    return filled


def remove_outliers(signal, k_sigma=6.0):
    """Replace samples beyond k_sigma standard deviations by a spline across each run"""
    if signal.n_samples < 5:
        raise DataValidationError(f"Outlier removal needs at least 5 samples, got {signal.n_samples}")
    out = signal.samples.copy()
    for c, name in enumerate(signal.channel_names):
        column = signal.samples[:, c]
        mu = column.mean()
        sigma = column.std()
        if sigma == 0:
            continue
        flags = np.abs(column - mu) > k_sigma * sigma
        if not flags.any():
            continue
        if flags.mean() > 0.5:
            raise DataValidationError(f"channel unusable: {name} ({flags.mean():.0%} of samples flagged)")
        logger.debug(f"Replacing {int(flags.sum())} outlier samples in {name}")
        out[:, c] = _spline_fill(column, flags)
    return signal.replace(out)


def rms_envelope(signal, window_ms=200.0, out_rate_hz=60.0):
    """Windowed RMS centred on each output timestamp, resampled to out_rate_hz"""
    if window_ms * signal.rate_hz / 1000.0 < 1:
        raise DataValidationError(f"RMS window of {window_ms} ms holds less than one sample")
    if out_rate_hz > signal.rate_hz:
        raise DataValidationError(f"Output rate {out_rate_hz} Hz exceeds input rate {signal.rate_hz} Hz")
    times = signal.times
    duration = times[-1]
    n_out = int(np.floor(duration * out_rate_hz + 1e-9)) + 1
    half = window_ms / 2000.0
    out = np.empty((n_out, signal.n_channels))
    for j in range(n_out):
        t_j = j / out_rate_hz
        lo = np.searchsorted(times, t_j - half, side='left')
        hi = np.searchsorted(times, t_j + half, side='right')
        if hi <= lo:
            raise DataValidationError(f"Empty RMS window at t={t_j:.4f}s")
        window = signal.samples[lo:hi]
        out[j] = np.sqrt(np.mean(window * window, axis=0))
    return SampledSignal(out, out_rate_hz, signal.channel_names)


def savgol_smooth(signal, poly_order=3, window_len=31):
    """Savitzky-Golay smoothing per channel; edges use the one-sided end window"""
    if window_len % 2 == 0:
        raise DataValidationError(f"Savitzky-Golay window must be odd, got {window_len}")
    if window_len <= poly_order:
        raise DataValidationError(f"Savitzky-Golay window {window_len} must exceed order {poly_order}")
    if window_len > signal.n_samples:
        raise DataValidationError(f"Savitzky-Golay window {window_len} longer than signal ({signal.n_samples})")
    smoothed = savgol_filter(signal.samples, window_len, poly_order, axis=0, mode='interp')
    return signal.replace(smoothed)


def forward_difference(signal):
    """f(n+1) - f(n); the last value is repeated to keep the length"""
    if signal.n_samples < 2:
        raise DataValidationError("Forward difference needs at least 2 samples")
    diff = np.diff(signal.samples, axis=0)
    return signal.replace(np.vstack([diff, diff[-1:]]))


def fit_normalization(signals, target_range):
    if not signals:
        raise DataValidationError("No signals to fit normalization on")
    names = signals[0].channel_names
    for s in signals[1:]:
        if s.channel_names != names:
            raise ShapeError("Signals disagree on channel names")
    stacked = np.vstack([s.samples for s in signals])
    return NormalizationParams(stacked.min(axis=0), stacked.max(axis=0), tuple(target_range), names)


def _check_channels(signal, params):
    if signal.channel_names != params.channel_names:
        raise ShapeError(f"Normalization fitted on {params.channel_names}, signal has {signal.channel_names}")


def apply_normalization(signal, params):
    """Map [min, max] per channel affinely onto the target range; clipped to it"""
    _check_channels(signal, params)
    lo, hi = params.target_range
    span = params.maximum - params.minimum
    degenerate = span < DEGENERATE_SPAN
    safe_span = np.where(degenerate, 1.0, span)
    scaled = lo + (signal.samples - params.minimum) / safe_span * (hi - lo)
    scaled = np.where(degenerate, (lo + hi) / 2.0, scaled)
    return signal.replace(np.clip(scaled, lo, hi))


def invert_normalization(signal, params):
    _check_channels(signal, params)
    lo, hi = params.target_range
    span = params.maximum - params.minimum
    degenerate = span < DEGENERATE_SPAN
    restored = params.minimum + (signal.samples - lo) / (hi - lo) * span
    restored = np.where(degenerate, params.minimum, restored)
    return signal.replace(restored)


def rest_mask_for(signal, rest_s):
    """Samples inside the leading rest window; always at least the first sample"""
    mask = signal.times < rest_s
    mask[0] = True
    return mask


def _effective_window(n_samples, config):
    window = config.savgol_window
    if window > n_samples:
        window = n_samples if n_samples % 2 == 1 else n_samples - 1
        logger.warning(f"Trial of {n_samples} samples: Savitzky-Golay window shortened to {window}")
    if window <= config.savgol_order:
        raise DataValidationError(f"Trial of {n_samples} samples is too short to smooth")
    return window


def align_streams(*signals):
    """Truncate equally-sampled streams to their common length"""
    rates = {s.rate_hz for s in signals}
    if len(rates) != 1:
        raise ShapeError(f"Streams sampled at different rates: {sorted(rates)}")
    n = min(s.n_samples for s in signals)
    return [s.truncate(n) for s in signals]


def motion_table(trial, config=None):
    """Smoothed angles and EEF pose with their first and second forward differences"""
    config = config or PipelineConfig()
    joints, eef = align_streams(trial.joints, trial.eef)
    window = _effective_window(joints.n_samples, config)
    angles = savgol_smooth(joints, config.savgol_order, window)
    velocity = forward_difference(angles)
    acceleration = forward_difference(velocity)
    pose = savgol_smooth(eef, config.savgol_order, window)
    pose_velocity = forward_difference(pose)
    pose_acceleration = forward_difference(pose_velocity)
    table = np.hstack([angles.samples, velocity.samples, acceleration.samples,
                       pose.samples, pose_velocity.samples, pose_acceleration.samples])
    return SampledSignal(table, joints.rate_hz, MOTION_COLUMNS)


def process_emg(emg, rest_mask, config=None):
    """Raw EMG to its 60 Hz RMS envelope; an EMG already at the output rate passes through"""
    config = config or PipelineConfig()
    if emg.rate_hz == config.out_rate_hz:
        return emg
    if emg.rate_hz < config.out_rate_hz:
        raise DataValidationError(f"EMG rate {emg.rate_hz} Hz below output rate {config.out_rate_hz} Hz")
    corrected = baseline_correct(emg, rest_mask)
    cleaned = remove_outliers(corrected, config.outlier_k_sigma)
    return rms_envelope(cleaned, config.rms_window_ms, config.out_rate_hz)


def process_trial(trial, config=None):
    """(motion table, EMG envelope) for one trial, aligned to one length"""
    config = config or PipelineConfig()
    if trial.joints.rate_hz != config.out_rate_hz:
        raise DataValidationError(f"Motion sampled at {trial.joints.rate_hz} Hz, expected {config.out_rate_hz} Hz")
    rest_s = trial.rest_s if trial.rest_s else config.rest_s
    envelope = process_emg(trial.emg, rest_mask_for(trial.emg, rest_s), config)
    table = motion_table(trial, config)
    return align_streams(table, envelope)


def build_features(trial, config, norm, pipeline=None, table=None):
    """Normalized feature sequence for the columns the input config selects"""
    config = config if isinstance(config, InputConfig) else InputConfig(config)
    if table is None:
        if trial.joints.n_samples != trial.eef.n_samples or trial.joints.rate_hz != trial.eef.rate_hz:
            raise ShapeError(f"Motion streams of {trial.trial_id} are not aligned")
        table = motion_table(trial, pipeline)
    columns = config.columns
    if norm.channel_names == MOTION_COLUMNS:
        features = apply_normalization(table, norm).select(columns)
    elif norm.channel_names == columns:
        features = apply_normalization(table.select(columns), norm)
    else:
        raise ShapeError(f"Normalization channels do not match input variant {config.variant.value}")
    if features.n_channels != config.feature_width:
        raise ShapeError(f"Built {features.n_channels} feature columns, expected {config.feature_width}")
    return features


@dataclass
class ProcessedTrial:
    trial_id: str
    subject_id: str
    motion_id: str
    repetition: int
    features: np.ndarray
    targets: np.ndarray
    rate_hz: float = 60.0


@dataclass
class ProcessedDataset:
    variant: InputVariant
    trials: dict
    emg_norm: dict
    motion_norm: dict
    config: PipelineConfig
    info: dict = field(default_factory=dict)

    @property
    def feature_names(self):
        return list(VARIANT_COLUMNS[InputVariant(self.variant)])

    @property
    def feature_width(self):
        return len(self.feature_names)

    def sequences(self, trial_ids):
        """[(features, targets)] in the order given"""
        missing = [tid for tid in trial_ids if tid not in self.trials]
        if missing:
            raise DataValidationError(f"Dataset has no trials {missing[:5]}")
        return [(self.trials[tid].features, self.trials[tid].targets) for tid in trial_ids]


def process_dataset(trials, variant, config=None, norm_trial_ids=None):
    """Run the full pipeline; normalization is fitted per subject on norm_trial_ids"""
    config = config or PipelineConfig()
    input_config = InputConfig(variant)
    with ThreadPoolExecutor(max_workers=app_config['THREADS']) as pool:
        processed = list(pool.map(lambda t: process_trial(t, config), trials))
    norm_ids = None if norm_trial_ids is None else set(norm_trial_ids)

    by_subject = {}
    for trial, (table, envelope) in zip(trials, processed):
        by_subject.setdefault(trial.subject_id, []).append((trial, table, envelope))

    emg_norm = {}
    motion_norm = {}
    for subject_id, items in by_subject.items():
        fit_items = items if norm_ids is None else [it for it in items if it[0].trial_id in norm_ids]
        if not fit_items:
            logger.warning(f"No normalization trials for subject {subject_id}; fitting on all of its trials")
            fit_items = items
        motion_norm[subject_id] = fit_normalization([it[1] for it in fit_items], MOTION_RANGE)
        emg_norm[subject_id] = fit_normalization([it[2] for it in fit_items], EMG_RANGE)
        logger.info(f"Subject {subject_id}: normalization fitted on {len(fit_items)} of {len(items)} trials")

    out = {}
    for trial, (table, envelope) in zip(trials, processed):
        features = build_features(trial, input_config, motion_norm[trial.subject_id], table=table)
        targets = apply_normalization(envelope, emg_norm[trial.subject_id])
        out[trial.trial_id] = ProcessedTrial(
            trial_id=trial.trial_id,
            subject_id=trial.subject_id,
            motion_id=trial.motion_id,
            repetition=trial.repetition,
            features=features.samples,
            targets=targets.samples,
            rate_hz=features.rate_hz,
        )
    return ProcessedDataset(
        variant=input_config.variant,
        trials=out,
        emg_norm=emg_norm,
        motion_norm=motion_norm,
        config=config,
        info={'normalization_scope': 'all' if norm_ids is None else 'train'},
    )
