"""
The five EMG-generation architectures and the input shaping each one needs.

    rnn     stateful LSTM stack trained on whole sequences
    rnnseq  LSTM trained on warm-up sub-sequences, predicted one step at a time
    fnn     pointwise dense stack
    fnnseq  dense stack over lagged feature rows
    cnn     same-padded temporal convolutions
"""
import enum
import logging
from dataclasses import dataclass, asdict, field
import numpy as np
from forms import ArchitectureConfigForm, validate_config
from nn_engine import LayerSpec, Network, SampleBatches, SequenceBatches, load_params, save_params
from utils import DataValidationError, ShapeError

logger = logging.getLogger(__name__)

OUTPUT_WIDTH = 8
FNNSEQ_LAGS = (1, 2, 4, 8)


class ArchitectureId(str, enum.Enum):
    RNN = 'rnn'
    RNNSEQ = 'rnnseq'
    FNN = 'fnn'
    FNNSEQ = 'fnnseq'
    CNN = 'cnn'


@dataclass
class ArchitectureConfig:
    arch_id: ArchitectureId = ArchitectureId.RNN
    feature_width: int = 18
    input_dropout: float = 0.1
    hidden_dropout: float = 0.0
    lstm_units: tuple = (256, 128, 64)
    rnnseq_units: int = 128
    dense_units: tuple = (512, 256, 128)
    cnn_filters: tuple = (128, 128, 128, 128, 64)
    cnn_kernels: tuple = (32, 8, 8, 4, 4)
    warmup_k: int = 5
    lags: tuple = FNNSEQ_LAGS

    def __post_init__(self):
        self.arch_id = ArchitectureId(self.arch_id)
        for name in ('lstm_units', 'dense_units', 'cnn_filters', 'cnn_kernels', 'lags'):
            values = tuple(int(v) for v in getattr(self, name))
            if not values or min(values) < 1:
                raise DataValidationError(f"{name} must be a non-empty list of positive integers")
            setattr(self, name, values)
        if len(self.cnn_filters) != len(self.cnn_kernels):
            raise DataValidationError("cnn_filters and cnn_kernels must have the same length")
        if list(self.lags) != sorted(set(self.lags)):
            raise DataValidationError("lags must be strictly increasing")

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        layer_fields = {k: data.pop(k) for k in
                        ('lstm_units', 'dense_units', 'cnn_filters', 'cnn_kernels', 'lags') if k in data}
        scalars = validate_config(ArchitectureConfigForm, data, 'architecture config')
        return cls(**scalars, **layer_fields)

    def to_dict(self):
        data = asdict(self)
        data['arch_id'] = self.arch_id.value
        for name in ('lstm_units', 'dense_units', 'cnn_filters', 'cnn_kernels', 'lags'):
            data[name] = list(data[name])
        return data


@dataclass
class SubSequence:
    """Warm-up rows at exponentially spaced lags, then the row to predict"""
    warmup_inputs: np.ndarray
    target_input: np.ndarray
    target_output: np.ndarray = None
    lags: list = field(default_factory=list)

    @property
    def inputs(self):
        return np.vstack([self.warmup_inputs, self.target_input[None, :]])


def warmup_lags(k):
    """[2^k, ..., 4, 2, 1]: lags ordered so that the rows come out in ascending time"""
    return [2 ** i for i in range(k, -1, -1)]


def make_subsequences(features, targets=None, k=5):
    """One SubSequence per timestep; lags reaching before the sequence start are dropped"""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ShapeError(f"Expected a [T x features] sequence, got {features.shape}")
    if targets is not None and np.shape(targets)[0] != features.shape[0]:
        raise ShapeError("Features and targets differ in length")
    all_lags = warmup_lags(k)
    out = []
    for t in range(features.shape[0]):
        lags = [lag for lag in all_lags if lag <= t]
        rows = [t - lag for lag in lags]
        out.append(SubSequence(
            warmup_inputs=features[rows].reshape(len(rows), features.shape[1]),
            target_input=features[t],
            target_output=None if targets is None else np.asarray(targets[t], dtype=float),
            lags=lags,
        ))
    return out


def make_lagged_features(features, lags=FNNSEQ_LAGS):
    """Row t = [x(t), x(t-l1), x(t-l2), ...]; indices before 0 clamp to row 0"""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise ShapeError(f"Expected a [T x features] sequence, got {features.shape}")
    steps = np.arange(features.shape[0])
    blocks = [features] + [features[np.maximum(steps - lag, 0)] for lag in lags]
    return np.hstack(blocks)


def receptive_field(kernels):
    return int(sum(k - 1 for k in kernels) + 1)


class EmgModel:
    """Network plus the input shaping and batching of one architecture"""
    arch_id = None

    def __init__(self, config, seed=0, params=None):
        if config.arch_id != self.arch_id:
            raise DataValidationError(f"{type(self).__name__} built from a {config.arch_id.value} config")
        self.config = config
        self.network = Network(self.layer_specs(), self.input_width, seed=seed, params=params)

    @property
    def input_width(self):
        return self.config.feature_width

    def layer_specs(self):
        raise NotImplementedError

    def _input_dropout(self):
        return [LayerSpec.dropout(self.config.input_dropout)]

    def _hidden_dropout(self):
        return [LayerSpec.dropout(self.config.hidden_dropout)] if self.config.hidden_dropout > 0 else []

    def _check_features(self, features):
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[1] != self.config.feature_width:
            raise ShapeError(f"Expected [T x {self.config.feature_width}] features, got {features.shape}")
        return features

    def batch_source(self, sequences):
        """Batch source over [(features [T x F], targets [T x 8])]"""
        raise NotImplementedError

    def predict(self, features):
        """[T x 8] output for one [T x feature_width] sequence"""
        raise NotImplementedError

    def adjust_train_config(self, train_config):
        return train_config

    def param_count(self):
        return self.network.param_count()

    def get_params(self):
        return self.network.get_params()

    def set_params(self, params):
        self.network.set_params(params)

    def header(self):
        return {'architecture': self.config.to_dict(), 'layers': self.network.spec_chain()}


class RnnModel(EmgModel):
    arch_id = ArchitectureId.RNN

    def layer_specs(self):
        specs = self._input_dropout()
        for units in self.config.lstm_units:
            specs.append(LayerSpec.lstm(units, stateful=True, return_sequences=True))
            specs += self._hidden_dropout()
        specs.append(LayerSpec.time_distributed(OUTPUT_WIDTH))
        return specs

    def batch_source(self, sequences):
        # state is carried from one sequence to the next in dataset order
        return SequenceBatches(sequences, allow_shuffle=False, max_batch=1)

    def adjust_train_config(self, train_config):
        return train_config.replace(batch_size=1, shuffle=False)

    def predict(self, features):
        features = self._check_features(features)
        self.network.reset_states()
        out = self.network.forward(features[None, :, :])[0]
        self.network.reset_states()
        return out


class OnlinePredictor:
    """Batch-1 stateful twin of an RNNseq network, fed one feature row at a time"""

    def __init__(self, model):
        self.network = Network(model.layer_specs(stateful=True), model.input_width,
                               params=model.get_params())
        self.steps_fed = 0

    def reset(self):
        """Start a new sequence"""
        self.network.reset_states()

    def step(self, row):
        """One lstm_step per LSTM layer; state carries over to the next row"""
        row = np.asarray(row, dtype=float)
        self.steps_fed += 1
        return self.network.forward(row[None, None, :])[0]

    def run(self, features):
        self.reset()
        outputs = np.vstack([self.step(row) for row in features])
        self.reset()
        return outputs

    def warm_up(self, sub):
        """Prediction after replaying a SubSequence from a fresh state"""
        self.reset()
        for row in sub.warmup_inputs:
            self.step(row)
        out = self.step(sub.target_input)
        self.reset()
        return out


class RnnSeqModel(EmgModel):
    arch_id = ArchitectureId.RNNSEQ

    def layer_specs(self, stateful=False, return_sequences=False):
        specs = self._input_dropout()
        specs.append(LayerSpec.lstm(self.config.rnnseq_units, stateful=stateful,
                                    return_sequences=return_sequences))
        specs += self._hidden_dropout()
        specs.append(LayerSpec.dense(OUTPUT_WIDTH, activation='linear'))
        return specs

    def _subsequence_pairs(self, sequences):
        pairs = []
        for features, targets in sequences:
            for sub in make_subsequences(features, targets, self.config.warmup_k):
                pairs.append((sub.inputs, sub.target_output))
        return pairs

    def batch_source(self, sequences):
        return SequenceBatches(self._subsequence_pairs(sequences), allow_shuffle=True)

    def predict(self, features):
        """Whole sequence through the stateful prediction network, one output per row"""
        features = self._check_features(features)
        network = Network(self.layer_specs(stateful=True, return_sequences=True), self.input_width,
                          params=self.get_params())
        return network.forward(features[None, :, :])[0]

    def online_predictor(self):
        return OnlinePredictor(self)

    def predict_online(self, features):
        return self.online_predictor().run(self._check_features(features))


class FnnModel(EmgModel):
    arch_id = ArchitectureId.FNN

    def layer_specs(self):
        specs = self._input_dropout()
        for units in self.config.dense_units:
            specs.append(LayerSpec.dense(units, activation='relu'))
            specs += self._hidden_dropout()
        specs.append(LayerSpec.dense(OUTPUT_WIDTH, activation='linear'))
        return specs

    def shape_inputs(self, features):
        return features

    def batch_source(self, sequences):
        inputs = np.vstack([self.shape_inputs(self._check_features(x)) for x, _ in sequences])
        targets = np.vstack([np.asarray(y, dtype=float) for _, y in sequences])
        return SampleBatches(inputs, targets)

    def predict(self, features):
        return self.network.forward(self.shape_inputs(self._check_features(features)))


class FnnSeqModel(FnnModel):
    arch_id = ArchitectureId.FNNSEQ

    @property
    def input_width(self):
        return self.config.feature_width * (1 + len(self.config.lags))

    def shape_inputs(self, features):
        return make_lagged_features(features, self.config.lags)


class CnnModel(EmgModel):
    arch_id = ArchitectureId.CNN

    def layer_specs(self):
        specs = self._input_dropout()
        for filters, kernel in zip(self.config.cnn_filters, self.config.cnn_kernels):
            specs.append(LayerSpec.conv1d(filters, kernel, activation='relu'))
            specs += self._hidden_dropout()
        specs.append(LayerSpec.time_distributed(OUTPUT_WIDTH))
        return specs

    @property
    def min_length(self):
        return max(self.config.cnn_kernels)

    @property
    def receptive_field(self):
        return receptive_field(self.config.cnn_kernels)

    def _check_length(self, features):
        if features.shape[0] < self.min_length:
            raise DataValidationError(
                f"sequence too short for CNN: {features.shape[0]} < {self.min_length} samples")

    def batch_source(self, sequences):
        for features, _ in sequences:
            self._check_length(np.asarray(features))
        return SequenceBatches(sequences, allow_shuffle=True)

    def predict(self, features):
        features = self._check_features(features)
        self._check_length(features)
        return self.network.forward(features[None, :, :])[0]


MODEL_CLASSES = {
    ArchitectureId.RNN: RnnModel,
    ArchitectureId.RNNSEQ: RnnSeqModel,
    ArchitectureId.FNN: FnnModel,
    ArchitectureId.FNNSEQ: FnnSeqModel,
    ArchitectureId.CNN: CnnModel,
}


def build_model(config, seed=0, params=None):
    if not isinstance(config, ArchitectureConfig):
        config = ArchitectureConfig.from_dict(config)
    model = MODEL_CLASSES[config.arch_id](config, seed=seed, params=params)
    logger.debug(f"Built {config.arch_id.value} with {model.param_count()} parameters")
    return model


def build_rnn(feature_width, **overrides):
    return build_model(ArchitectureConfig(ArchitectureId.RNN, feature_width, **overrides))


def build_rnnseq_pair(feature_width, **overrides):
    """(training model, online predictor sharing a verified copy of its weights)"""
    model = build_model(ArchitectureConfig(ArchitectureId.RNNSEQ, feature_width, **overrides))
    return model, model.online_predictor()


def build_fnn(feature_width, **overrides):
    return build_model(ArchitectureConfig(ArchitectureId.FNN, feature_width, **overrides))


def build_fnnseq(feature_width, **overrides):
    return build_model(ArchitectureConfig(ArchitectureId.FNNSEQ, feature_width, **overrides))


def build_cnn(feature_width, **overrides):
    return build_model(ArchitectureConfig(ArchitectureId.CNN, feature_width, **overrides))


def save_model(path, model, extra_header=None):
    header = model.header()
    header.update(extra_header or {})
    return save_params(path, model.get_params(), header)


def load_model(path):
    """(model, header) from a weights file written by save_model"""
    params, header = load_params(path)
    if 'architecture' not in header:
        raise DataValidationError(f"{path} carries no architecture header")
    config = ArchitectureConfig.from_dict(header['architecture'])
    return build_model(config, params=params), header
