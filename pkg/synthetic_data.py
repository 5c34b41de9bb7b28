"""
Synthetic subjects x motions x repetitions datasets from a known forward model.

Trajectories are minimum-jerk moves through per-motion waypoints that start
and end at the rest pose. EMG is produced by a fixed synergy over joint
speed, acceleration and flexion-gated excursion, low-pass filtered, then
passed through a per-subject transform (gain, offset, channel mixing, power
law, noise). The last subject gets a deliberately shifted transform.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
import numpy as np
from scipy.signal import lfilter
from scipy.spatial.transform import Rotation
from app import config as app_config
from dataset_io import build_manifest, write_manifest, write_trial
from forms import SynthConfigForm, validate_config
from signal_pipeline import EEF_NAMES, EMG_CHANNELS, JOINT_NAMES, SampledSignal, TrialRecording
from utils import DataValidationError, derive_rng

logger = logging.getLogger(__name__)

REST_POSE = np.zeros(len(JOINT_NAMES))
SEGMENT_LENGTHS = (0.30, 0.25, 0.08)  # upper arm, forearm, hand (m)

# drive scaling: deg/s, deg/s^2 and deg to roughly unit range
VELOCITY_SCALE = 200.0
ACCELERATION_SCALE = 2000.0
EXCURSION_SCALE = 90.0


@dataclass
class MotionTemplate:
    motion_id: str
    name: str
    category: str
    waypoints: list  # dicts joint name -> angle (deg) relative to rest
    duration_s: float = 3.0

    def __post_init__(self):
        if self.category not in ('simple', 'combined', 'complex'):
            raise DataValidationError(f"Unknown motion category {self.category}")
        for point in self.waypoints:
            unknown = set(point) - set(JOINT_NAMES)
            if unknown:
                raise DataValidationError(f"{self.name}: unknown joints {sorted(unknown)}")

    def poses(self):
        """Rest, each waypoint, rest again as [n x 6] angles"""
        inner = [REST_POSE + np.array([p.get(j, 0.0) for j in JOINT_NAMES]) for p in self.waypoints]
        return np.vstack([REST_POSE] + inner + [REST_POSE])


def _template_set():
    sa, sf, ef, er, wa, wf = JOINT_NAMES
    raw = [
        ('shoulder_flexion', 'simple', [{sf: 90}]),
        ('shoulder_extension', 'simple', [{sf: -40}]),
        ('shoulder_abduction', 'simple', [{sa: 90}]),
        ('elbow_flexion', 'simple', [{ef: 100}]),
        ('elbow_flexion_supinated', 'simple', [{ef: 100, er: -60}]),
        ('wrist_flexion', 'simple', [{wf: 60}]),
        ('wrist_extension', 'simple', [{wf: -50}]),
        ('wrist_pronation', 'simple', [{er: 70}]),
        ('elbow_rotation', 'simple', [{er: 80}, {er: -40}]),
        ('wrist_abduction', 'simple', [{wa: 20}]),
        ('wrist_adduction', 'simple', [{wa: -30}]),
        ('shoulder_abduction_elbow_flexion', 'combined', [{sa: 80, ef: 90}]),
        ('shoulder_flexion_elbow_flexion', 'combined', [{sf: 80, ef: 90}]),
        ('shoulder_abduction_wrist_extension', 'combined', [{sa: 80, wf: -45}]),
        ('breaststroke', 'complex', [{sf: 90, ef: 90}, {sf: 90, sa: 60, ef: 10}, {sa: 40, ef: 100}]),
        ('relay_handover', 'complex', [{sf: -30, ef: 60}, {sf: 50, ef: 20, er: 40}]),
        ('reading_clock', 'complex', [{sf: 45, ef: 110, er: 60}, {sf: 45, ef: 110, er: 60, wf: -20}]),
        ('diagonal_reach', 'complex', [{sf: 110, sa: 40, ef: 10, wa: 10}]),
        ('waving', 'complex', [{sa: 90, ef: 90}, {sa: 90, ef: 90, er: 30, wa: 20},
                               {sa: 90, ef: 90, er: -30, wa: -20}, {sa: 90, ef: 90, er: 30, wa: 20}]),
        # held out as the unseen motion
        ('pointing_three_points', 'complex', [{sf: 70, sa: 20, ef: 20}, {sf: 85, sa: 50, ef: 10, wf: -10},
                                              {sf: 60, sa: -10, ef: 30, er: 20}]),
    ]
    return [MotionTemplate(f"M{i + 1:02d}", name, category, points) for i, (name, category, points) in
            enumerate(raw)]


MOTION_TEMPLATES = _template_set()
NEW_MOTION_NAME = 'pointing_three_points'


def select_templates(n_motions):
    """First n-1 templates plus the new motion, which always comes last"""
    if not 2 <= n_motions <= len(MOTION_TEMPLATES):
        raise DataValidationError(f"n_motions must lie in [2, {len(MOTION_TEMPLATES)}], got {n_motions}")
    return MOTION_TEMPLATES[:n_motions - 1] + [MOTION_TEMPLATES[-1]]


@dataclass
class SynthConfig:
    n_subjects: int = 5
    n_motions: int = 20
    n_reps: int = 18
    seed: int = 42
    rest_s: float = 1.0
    motion_s: float = 3.0
    jitter: float = 0.05
    tau_ms: float = 60.0
    noise: float = 0.005
    motion_rate_hz: float = 60.0
    emg_rate_hz: float = 2222.0
    raw_emg: bool = False

    @classmethod
    def from_dict(cls, data):
        return cls(**validate_config(SynthConfigForm, data, 'synth config'))

    def to_dict(self):
        return asdict(self)


def minimum_jerk(start, end, n_samples):
    """Minimum-jerk path from start to end over n_samples (endpoints included)"""
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    tau = np.linspace(0.0, 1.0, n_samples)[:, None]
    shape = 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5
    return start + (end - start) * shape


def gen_trajectory(template, rng, config=None, amplitude_scale=None, timing_scale=None):
    """
    Joint angles (deg) at the motion rate: rest lead-in, the movement, rest tail.

    Amplitude and timing are jittered by up to +-config.jitter per repetition.
    """
    config = config or SynthConfig()
    if amplitude_scale is None:
        amplitude_scale = 1.0 + rng.uniform(-config.jitter, config.jitter)
    if timing_scale is None:
        timing_scale = 1.0 + rng.uniform(-config.jitter, config.jitter)
    rate = config.motion_rate_hz
    poses = REST_POSE + (template.poses() - REST_POSE) * amplitude_scale
    n_segments = len(poses) - 1
    movement_samples = max(n_segments, int(round(config.motion_s * timing_scale * rate)))
    bounds = np.linspace(0, movement_samples, n_segments + 1).round().astype(int)
    n_rest = int(round(config.rest_s * rate))

    pieces = [np.tile(REST_POSE, (n_rest, 1))]
    for i in range(n_segments):
        segment = minimum_jerk(poses[i], poses[i + 1], bounds[i + 1] - bounds[i] + 1)
        pieces.append(segment[:-1])
    pieces.append(np.tile(REST_POSE, (n_rest + 1, 1)))
    return SampledSignal(np.vstack(pieces), rate, JOINT_NAMES)


def forward_kinematics(joints):
    """Hand pose [T x 7] (position, quaternion w,x,y,z) of a three-segment arm hanging along -z"""
    angles = joints.select(JOINT_NAMES).samples
    sa, sf, ef, er, wa, wf = (angles[:, i] for i in range(6))
    l1, l2, l3 = SEGMENT_LENGTHS
    down = np.array([0.0, 0.0, -1.0])
    upper = Rotation.from_euler('XY', np.column_stack([sa, sf]), degrees=True)
    fore = upper * Rotation.from_euler('YZ', np.column_stack([ef, er]), degrees=True)
    hand = fore * Rotation.from_euler('XY', np.column_stack([wa, wf]), degrees=True)
    position = upper.apply(down * l1) + fore.apply(down * l2) + hand.apply(down * l3)
    xyzw = hand.as_quat()
    quat = np.column_stack([xyzw[:, 3], xyzw[:, :3]])
    if quat[0, 0] < 0:
        quat[0] = -quat[0]
    for t in range(1, len(quat)):
        if np.dot(quat[t], quat[t - 1]) < 0:
            quat[t] = -quat[t]
    return SampledSignal(np.hstack([position, quat]), joints.rate_hz, EEF_NAMES)


def _synergy():
    """[8 x 18]: rows channels; columns |vel| x6, |acc| x6, gated excursion x6"""
    # channel -> {joint: (velocity, acceleration, excursion)}; negative excursion weight gates extension
    table = {
        'deltoid_posterior': {'shoulder_flexion': (0.8, 0.3, -0.9), 'shoulder_abduction': (0.3, 0.1, 0.0)},
        'deltoid_medial': {'shoulder_abduction': (0.9, 0.3, 1.0), 'shoulder_flexion': (0.2, 0.1, 0.2)},
        'deltoid_anterior': {'shoulder_flexion': (0.9, 0.3, 1.0), 'shoulder_abduction': (0.2, 0.1, 0.2)},
        'biceps_short_head': {'elbow_flexion': (0.9, 0.3, 0.8), 'shoulder_flexion': (0.2, 0.1, 0.1)},
        'triceps_lateral_head': {'elbow_flexion': (0.7, 0.4, 0.0), 'shoulder_flexion': (0.2, 0.1, -0.4)},
        'extensor_carpi_radialis': {'wrist_flexion': (0.6, 0.3, -1.0), 'wrist_abduction': (0.5, 0.2, 0.6)},
        'pronator_teres': {'elbow_rotation': (0.9, 0.3, 0.8)},
        'flexor_carpi_ulnaris': {'wrist_flexion': (0.7, 0.3, 1.0), 'wrist_abduction': (0.4, 0.2, -0.6)},
    }
    synergy = np.zeros((len(EMG_CHANNELS), 3 * len(JOINT_NAMES)))
    gates = np.ones((len(EMG_CHANNELS), len(JOINT_NAMES)))
    n = len(JOINT_NAMES)
    for c, channel in enumerate(EMG_CHANNELS):
        for joint, (w_vel, w_acc, w_exc) in table[channel].items():
            j = JOINT_NAMES.index(joint)
            synergy[c, j] = w_vel
            synergy[c, n + j] = w_acc
            synergy[c, 2 * n + j] = abs(w_exc)
            gates[c, j] = -1.0 if w_exc < 0 else 1.0
    return synergy, gates


@dataclass
class ForwardEmgModel:
    synergy: np.ndarray = None
    gates: np.ndarray = None
    tau_ms: float = 60.0

    def __post_init__(self):
        if self.synergy is None:
            self.synergy, self.gates = _synergy()
        if self.gates is None:
            self.gates = np.ones((self.synergy.shape[0], len(JOINT_NAMES)))
        if np.any(self.synergy < 0):
            raise DataValidationError("Synergy weights must be non-negative")

    def drives(self, joints):
        """[T x 6] |velocity|, [T x 6] |acceleration| and [T x 8 x 6] gated excursion"""
        rate = joints.rate_hz
        angles = joints.samples
        velocity = np.gradient(angles, axis=0) * rate if len(angles) > 1 else np.zeros_like(angles)
        acceleration = np.gradient(velocity, axis=0) * rate if len(angles) > 1 else np.zeros_like(angles)
        excursion = (angles - REST_POSE)[:, None, :] * self.gates[None, :, :]
        return (np.abs(velocity) / VELOCITY_SCALE, np.abs(acceleration) / ACCELERATION_SCALE,
                np.maximum(excursion, 0.0) / EXCURSION_SCALE)

    def activation(self, joints):
        """Pre-transform activity [T x 8] >= 0: synergy drive through a first-order low-pass"""
        velocity, acceleration, excursion = self.drives(joints)
        n = len(JOINT_NAMES)
        drive = (velocity @ self.synergy[:, :n].T + acceleration @ self.synergy[:, n:2 * n].T
                 + np.einsum('tcj,cj->tc', excursion, self.synergy[:, 2 * n:]))
        dt = 1.0 / joints.rate_hz
        alpha = dt / (self.tau_ms / 1000.0 + dt)
        return np.maximum(lfilter([alpha], [1.0, alpha - 1.0], drive, axis=0), 0.0)


@dataclass
class SubjectTransform:
    gain: np.ndarray
    offset: np.ndarray
    mixing: np.ndarray
    gamma: np.ndarray
    noise: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=float)
        self.offset = np.asarray(self.offset, dtype=float)
        self.mixing = np.asarray(self.mixing, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if np.any(self.gain <= 0.05):
            raise DataValidationError("Gains must stay bounded away from zero")
        if np.any(self.offset < 0):
            raise DataValidationError("Offsets must be non-negative")
        if np.any(self.mixing < 0) or not np.allclose(self.mixing.sum(axis=1), 1.0):
            raise DataValidationError("Mixing matrix must be row-stochastic")

    @classmethod
    def identity(cls, n_channels=len(EMG_CHANNELS)):
        return cls(np.ones(n_channels), np.zeros(n_channels), np.eye(n_channels), np.ones(n_channels), 0.0)

    @classmethod
    def sample(cls, rng, noise=0.005, shifted=False, n_channels=len(EMG_CHANNELS)):
        """Random near-identity transform; shifted=True draws the strongly deviating held-out subject"""
        if shifted:
            gain = rng.uniform(0.4, 1.9, n_channels)
            offset = rng.uniform(0.02, 0.08, n_channels)
            mix_weight = 0.45
            gamma = rng.uniform(0.6, 1.6, n_channels)
        else:
            gain = rng.uniform(0.8, 1.2, n_channels)
            offset = rng.uniform(0.0, 0.03, n_channels)
            mix_weight = 0.1
            gamma = rng.uniform(0.9, 1.1, n_channels)
        spill = rng.uniform(0.0, 1.0, (n_channels, n_channels))
        np.fill_diagonal(spill, 0.0)
        spill /= spill.sum(axis=1, keepdims=True)
        mixing = (1.0 - mix_weight) * np.eye(n_channels) + mix_weight * spill
        return cls(gain, offset, mixing, gamma, noise, {'shifted': shifted})

    def to_dict(self):
        return {
            'gain': self.gain.tolist(),
            'offset': self.offset.tolist(),
            'mixing': self.mixing.tolist(),
            'gamma': self.gamma.tolist(),
            'noise': self.noise,
            'metadata': self.metadata,
        }

    def apply(self, activation, rng=None):
        shaped = np.power(activation, self.gamma) * self.gain
        out = shaped @ self.mixing.T + self.offset
        if self.noise > 0:
            if rng is None:
                raise DataValidationError("Noisy transform needs a random generator")
            out = out + rng.normal(0.0, self.noise, out.shape)
        return np.maximum(out, 0.0)


def forward_emg(joints, model, transform, rng=None):
    """8-channel EMG envelope at the motion rate"""
    envelope = transform.apply(model.activation(joints), rng)
    return SampledSignal(envelope, joints.rate_hz, EMG_CHANNELS)


def raw_emg(envelope, rate_hz, rng, dc_offset=0.0):
    """Amplitude-modulated zero-mean noise carrier whose RMS follows the envelope"""
    duration = (envelope.n_samples - 1) / envelope.rate_hz
    n_samples = int(np.floor(duration * rate_hz + 1e-9)) + 1
    times = np.arange(n_samples) / rate_hz
    upsampled = np.column_stack([np.interp(times, envelope.times, envelope.samples[:, c])
                                 for c in range(envelope.n_channels)])
    carrier = rng.standard_normal(upsampled.shape)
    return SampledSignal(dc_offset + upsampled * carrier, rate_hz, envelope.channel_names)


def subject_ids(n_subjects):
    return [f"S{i + 1}" for i in range(n_subjects)]


def subject_transforms(config):
    """One transform per subject; the last one is the shifted held-out subject"""
    transforms = {}
    ids = subject_ids(config.n_subjects)
    for i, subject in enumerate(ids):
        rng = derive_rng(config.seed, i)
        shifted = config.n_subjects > 1 and i == len(ids) - 1
        transforms[subject] = SubjectTransform.sample(rng, config.noise, shifted)
    return transforms


def gen_trial(config, model, transform, subject_index, subject, motion_index, template, repetition):
    traj_rng = derive_rng(config.seed, subject_index, motion_index, repetition, 0)
    noise_rng = derive_rng(config.seed, subject_index, motion_index, repetition, 1)
    amplitude_scale = 1.0 + traj_rng.uniform(-config.jitter, config.jitter)
    timing_scale = 1.0 + traj_rng.uniform(-config.jitter, config.jitter)
    joints = gen_trajectory(template, traj_rng, config, amplitude_scale, timing_scale)
    eef = forward_kinematics(joints)
    emg = forward_emg(joints, model, transform, noise_rng)
    if config.raw_emg:
        emg = raw_emg(emg, config.emg_rate_hz, noise_rng, dc_offset=0.01 * (subject_index + 1))
    return TrialRecording(
        subject_id=subject,
        motion_id=template.motion_id,
        repetition=repetition,
        emg=emg,
        joints=joints,
        eef=eef,
        rest_s=config.rest_s,
        metadata={
            'motion_name': template.name,
            'category': template.category,
            'amplitude_scale': amplitude_scale,
            'timing_scale': timing_scale,
        },
    )


def gen_trials(config=None):
    """All TrialRecordings of a dataset, in subject/motion/repetition order"""
    config = config or SynthConfig()
    templates = select_templates(config.n_motions)
    model = ForwardEmgModel(tau_ms=config.tau_ms)
    transforms = subject_transforms(config)
    jobs = []
    for s_idx, subject in enumerate(subject_ids(config.n_subjects)):
        for template in templates:
            motion_index = MOTION_TEMPLATES.index(template)
            for rep in range(1, config.n_reps + 1):
                jobs.append((s_idx, subject, motion_index, template, rep))
    with ThreadPoolExecutor(max_workers=app_config['THREADS']) as pool:
        trials = list(pool.map(
            lambda job: gen_trial(config, model, transforms[job[1]], *job), jobs))
    return trials, transforms


def gen_dataset(out_dir, config=None):
    """Write every trial plus manifest.json; returns the manifest"""
    config = config or SynthConfig()
    trials, transforms = gen_trials(config)
    for trial in trials:
        write_trial(out_dir, trial)
    ids = subject_ids(config.n_subjects)
    manifest = build_manifest(
        trials,
        held_out_subject=ids[-1] if config.n_subjects > 1 else None,
        new_motion=MOTION_TEMPLATES[-1].motion_id,
        extra={
            'motion_names': {t.motion_id: t.name for t in select_templates(config.n_motions)},
            'synth_config': config.to_dict(),
            'subject_transforms': {s: t.to_dict() for s, t in transforms.items()},
        },
    )
    write_manifest(out_dir, manifest)
    logger.info(f"Generated {len(trials)} trials for {config.n_subjects} subjects in {out_dir}")
    return manifest
