"""
Error metrics against the zero-line baseline and the tables built from them.

    MSE  = mean((pred - target)^2)          per channel
    MSE0 = mean(target^2)                   per channel, the all-zero prediction
    Z    = 100 * (1 - MSE / MSE0)           100 is perfect, 0 is no better than zero
"""
import logging
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from signal_pipeline import EMG_CHANNELS
from utils import DataValidationError, ShapeError, read_json, write_json_atomic

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
AGGREGATIONS = ('concatenate', 'per_trial')
LAYOUTS = ('architectures', 'architectures-mse', 'regimes', 'input-variants')
REGIME_COLUMNS = ['general', 'pretrain', 'subject']
ARCH_ORDER = ['rnn', 'rnnseq', 'fnn', 'fnnseq', 'cnn']
INPUT_ORDER = ['all', 'ang', 'vel', 'acc', 'eef', 'eefplus']


def _pair(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction shape {pred.shape} does not match target {target.shape}")
    if pred.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    if pred.shape[0] == 0:
        raise DataValidationError("No samples to score")
    return pred, target


def mse(pred, target):
    """Per-channel mean squared error over [n x channels]"""
    pred, target = _pair(pred, target)
    diff = pred - target
    return np.mean(diff * diff, axis=0)


def mse_zero(target):
    """Per-channel MSE of the all-zero prediction"""
    target = np.asarray(target, dtype=float)
    return mse(np.zeros_like(target), target)


def _z_from(mse_c, mse0_c):
    mse_c = np.asarray(mse_c, dtype=float)
    mse0_c = np.asarray(mse0_c, dtype=float)
    scorable = mse0_c > 0
    z = np.full(mse_c.shape, np.nan)
    z[scorable] = 100.0 * (1.0 - mse_c[scorable] / mse0_c[scorable])
    return z, scorable


def z_score(pred, target):
    """(per-channel Z with NaN for unscorable channels, mean Z over scorable channels)"""
    z, scorable = _z_from(mse(pred, target), mse_zero(target))
    average = float(np.mean(z[scorable])) if scorable.any() else float('nan')
    return z, average


def _clean(values):
    return [None if v is None or not np.isfinite(v) else float(v) for v in values]


def _restore(values):
    return np.array([np.nan if v is None else v for v in values], dtype=float)


@dataclass
class EvaluationReport:
    mse: np.ndarray
    mse0: np.ndarray
    z: np.ndarray
    average_z: float
    pooled_z: float
    average_mse: float
    n_samples: int
    unscorable: list
    aggregation: str = 'concatenate'
    channel_names: list = field(default_factory=lambda: list(EMG_CHANNELS))
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_errors(cls, mse_c, mse0_c, n_samples, aggregation='concatenate', channel_names=None,
                    metadata=None, z=None):
        mse_c = np.asarray(mse_c, dtype=float)
        mse0_c = np.asarray(mse0_c, dtype=float)
        names = list(channel_names or EMG_CHANNELS[:len(mse_c)])
        z_c, scorable = _z_from(mse_c, mse0_c)
        if z is not None:
            z_c = np.asarray(z, dtype=float)
        unscorable = [name for name, ok in zip(names, scorable) if not ok]
        for name in unscorable:
            logger.warning(f"Channel {name} has a zero target and cannot be scored")
        if scorable.any():
            average_z = float(np.nanmean(z_c[scorable]))
            pooled_z = float(100.0 * (1.0 - mse_c[scorable].sum() / mse0_c[scorable].sum()))
        else:
            average_z = pooled_z = float('nan')
        return cls(
            mse=mse_c, mse0=mse0_c, z=z_c,
            average_z=average_z, pooled_z=pooled_z, average_mse=float(mse_c.mean()),
            n_samples=int(n_samples), unscorable=unscorable, aggregation=aggregation,
            channel_names=names, metadata=dict(metadata or {}),
        )

    def to_dict(self):
        return {
            'version': REPORT_VERSION,
            'channel_names': self.channel_names,
            'mse': _clean(self.mse),
            'mse0': _clean(self.mse0),
            'z': _clean(self.z),
            'average_z': _clean([self.average_z])[0],
            'pooled_z': _clean([self.pooled_z])[0],
            'average_mse': self.average_mse,
            'n_samples': self.n_samples,
            'unscorable': self.unscorable,
            'aggregation': self.aggregation,
            'metadata': self.metadata,
        }

    @classmethod
    def from_dict(cls, data):
        if data.get('version') != REPORT_VERSION:
            raise DataValidationError(f"Unsupported report version {data.get('version')}")
        return cls(
            mse=_restore(data['mse']),
            mse0=_restore(data['mse0']),
            z=_restore(data['z']),
            average_z=_restore([data['average_z']])[0],
            pooled_z=_restore([data['pooled_z']])[0],
            average_mse=float(data['average_mse']),
            n_samples=int(data['n_samples']),
            unscorable=list(data['unscorable']),
            aggregation=data['aggregation'],
            channel_names=list(data['channel_names']),
            metadata=dict(data.get('metadata') or {}),
        )

    def save(self, path):
        return write_json_atomic(path, self.to_dict())

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path, 'evaluation report'))


def score_predictions(predictions, targets, aggregation='concatenate', metadata=None, channel_names=None):
    """EvaluationReport over paired lists of [T x 8] predictions and targets"""
    if aggregation not in AGGREGATIONS:
        raise DataValidationError(f"Unknown aggregation {aggregation}")
    if not predictions or len(predictions) != len(targets):
        raise DataValidationError("Need matching, non-empty prediction and target lists")
    n_samples = sum(np.shape(t)[0] for t in targets)
    if aggregation == 'concatenate':
        pred = np.vstack(predictions)
        target = np.vstack(targets)
        return EvaluationReport.from_errors(mse(pred, target), mse_zero(target), n_samples, aggregation,
                                            channel_names, metadata)
    per_mse = np.vstack([mse(p, t) for p, t in zip(predictions, targets)])
    per_mse0 = np.vstack([mse_zero(t) for t in targets])
    per_z = np.vstack([_z_from(m, m0)[0] for m, m0 in zip(per_mse, per_mse0)])
    with np.errstate(invalid='ignore'):
        z = np.array([np.nanmean(col) if np.isfinite(col).any() else np.nan for col in per_z.T])
    return EvaluationReport.from_errors(per_mse.mean(axis=0), per_mse0.mean(axis=0), n_samples, aggregation,
                                        channel_names, metadata, z=z)


def evaluate(model, dataset, trial_ids, metadata=None, aggregation='concatenate'):
    """Score a model on the given trials of a processed dataset"""
    if not trial_ids:
        raise DataValidationError("No trials to evaluate")
    sequences = dataset.sequences(trial_ids)
    predictions = [model.predict(features) for features, _ in sequences]
    targets = [t for _, t in sequences]
    meta = {'n_trials': len(trial_ids), 'input': getattr(dataset.variant, 'value', dataset.variant)}
    meta.update(metadata or {})
    report = score_predictions(predictions, targets, aggregation, meta)
    logger.info(f"Evaluated {len(trial_ids)} trials: average Z {report.average_z:.2f}, "
                f"pooled Z {report.pooled_z:.2f}, average MSE {report.average_mse:.6g}")
    return report


@dataclass
class RenderedTable:
    layout: str
    frame: pd.DataFrame

    @property
    def csv(self):
        return self.frame.to_csv(float_format='%.6g')

    @property
    def text(self):
        return self.frame.to_string(float_format=lambda v: f"{v:.4f}" if abs(v) < 1 else f"{v:.2f}",
                                    na_rep='-')

    def write(self, csv_path=None, text_path=None):
        if csv_path:
            with open(csv_path, 'w') as f:
                f.write(self.csv)
        if text_path:
            with open(text_path, 'w') as f:
                f.write(self.text + '\n')


def _ordered(values, preferred):
    known = [v for v in preferred if v in values]
    return known + sorted(v for v in values if v not in preferred)


def _meta(report, key, default='-'):
    return str(report.metadata.get(key, default))


def _cell_table(reports, row_key, row_order, col_key, col_order):
    cells = {}
    for r in reports:
        key = (_meta(r, row_key), _meta(r, col_key))
        if key in cells:
            logger.warning(f"Several reports for {key}; keeping the last one")
        cells[key] = r
    rows = _ordered({k[0] for k in cells}, row_order)
    cols = _ordered({k[1] for k in cells}, col_order)
    index = pd.MultiIndex.from_product([rows, ['Z', 'MSE']], names=[row_key, 'metric'])
    frame = pd.DataFrame(np.nan, index=index, columns=cols)
    for (row, col), r in cells.items():
        frame.loc[(row, 'Z'), col] = r.average_z
        frame.loc[(row, 'MSE'), col] = r.average_mse
    return frame


def render_table(reports, layout='architectures'):
    """Arrange reports in one of the result-table layouts"""
    if layout not in LAYOUTS:
        raise DataValidationError(f"Unknown table layout {layout}; choose from {', '.join(LAYOUTS)}")
    if not reports:
        raise DataValidationError("No reports to render")
    if layout in ('architectures', 'architectures-mse'):
        by_arch = {}
        for r in reports:
            by_arch[_meta(r, 'arch')] = r
        archs = _ordered(set(by_arch), ARCH_ORDER)
        channels = reports[0].channel_names
        metrics = ['MSE'] if layout == 'architectures-mse' else ['Z', 'MSE']
        index = pd.MultiIndex.from_product([archs, metrics], names=['arch', 'metric'])
        frame = pd.DataFrame(np.nan, index=index, columns=channels + ['average'])
        for arch, r in by_arch.items():
            if 'Z' in metrics:
                frame.loc[(arch, 'Z'), channels] = r.z
                frame.loc[(arch, 'Z'), 'average'] = r.average_z
            frame.loc[(arch, 'MSE'), channels] = r.mse
            frame.loc[(arch, 'MSE'), 'average'] = r.average_mse
    elif layout == 'regimes':
        frame = _cell_table(reports, 'arch', ARCH_ORDER, 'regime', REGIME_COLUMNS)
    else:
        frame = _cell_table(reports, 'input', INPUT_ORDER, 'regime', REGIME_COLUMNS)
    return RenderedTable(layout, frame)
