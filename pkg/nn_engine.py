"""
Minimal deterministic neural-network engine.

Layer kinds: Dense, TimeDistributedDense, LSTM, Conv1D, Dropout. Loss is
mean squared error, the optimizer is Adam, regularization is dropout plus
early stopping. Everything runs in float64 on numpy; each layer caches what
its backward pass needs during forward.
"""
import base64
import enum
import logging
from dataclasses import dataclass, asdict, replace
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from forms import TrainConfigForm, validate_config
from utils import DataValidationError, ShapeError, read_json, write_json_atomic

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = 'myosynth-weights'
WEIGHTS_VERSION = 1
ACTIVATIONS = ('relu', 'linear')


class LayerKind(str, enum.Enum):
    DENSE = 'Dense'
    LSTM = 'LSTM'
    CONV1D = 'Conv1D'
    DROPOUT = 'Dropout'
    TIME_DISTRIBUTED_DENSE = 'TimeDistributedDense'


@dataclass
class LayerSpec:
    kind: LayerKind
    units: int = None
    kernel_size: int = None
    rate: float = None
    activation: str = None
    stateful: bool = False
    return_sequences: bool = False

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        if self.kind == LayerKind.DROPOUT:
            if self.rate is None or not 0 <= self.rate < 1:
                raise DataValidationError(f"Dropout rate must lie in [0, 1), got {self.rate}")
            if self.units is not None or self.kernel_size is not None:
                raise DataValidationError("Dropout takes only a rate")
            return
        if self.units is None or int(self.units) < 1:
            raise DataValidationError(f"{self.kind.value} needs a positive unit count")
        self.units = int(self.units)
        if self.rate is not None:
            raise DataValidationError(f"{self.kind.value} takes no dropout rate")
        if self.kind == LayerKind.LSTM:
            self.activation = 'gate-internal'
            if self.kernel_size is not None:
                raise DataValidationError("LSTM takes no kernel size")
            return
        self.activation = self.activation or ('relu' if self.kind != LayerKind.TIME_DISTRIBUTED_DENSE else 'linear')
        if self.activation not in ACTIVATIONS:
            raise DataValidationError(f"Unknown activation {self.activation}")
        if self.kind == LayerKind.CONV1D:
            if self.kernel_size is None or int(self.kernel_size) < 1:
                raise DataValidationError("Conv1D needs kernel_size >= 1")
            self.kernel_size = int(self.kernel_size)
        elif self.kernel_size is not None:
            raise DataValidationError(f"{self.kind.value} takes no kernel size")

    @classmethod
    def dense(cls, units, activation='relu'):
        return cls(LayerKind.DENSE, units=units, activation=activation)

    @classmethod
    def time_distributed(cls, units, activation='linear'):
        return cls(LayerKind.TIME_DISTRIBUTED_DENSE, units=units, activation=activation)

    @classmethod
    def lstm(cls, units, stateful=False, return_sequences=False):
        return cls(LayerKind.LSTM, units=units, stateful=stateful, return_sequences=return_sequences)

    @classmethod
    def conv1d(cls, filters, kernel_size, activation='relu'):
        return cls(LayerKind.CONV1D, units=filters, kernel_size=kernel_size, activation=activation)

    @classmethod
    def dropout(cls, rate):
        return cls(LayerKind.DROPOUT, rate=rate)

    def to_dict(self):
        data = asdict(self)
        data['kind'] = self.kind.value
        return {key: value for key, value in data.items() if value is not None}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


# --- functional building blocks -------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def mse_loss(pred, target):
    """Mean squared error over all elements and its gradient with respect to pred"""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction shape {pred.shape} does not match target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def dense_forward(x, W, b, activation='linear'):
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"Dense expects {W.shape[0]} inputs, got {x.shape[-1]}")
    z = x @ W + b
    y = relu(z) if activation == 'relu' else z
    return y, (x, z, W, activation)


def dense_backward(grad, cache):
    """(input grad, dW, db)"""
    x, z, W, activation = cache
    if grad.shape != z.shape:
        raise ShapeError(f"Dense gradient shape {grad.shape} does not match output {z.shape}")
    if activation == 'relu':
        grad = grad * (z > 0)
    flat_x = x.reshape(-1, x.shape[-1])
    flat_g = grad.reshape(-1, grad.shape[-1])
    return grad @ W.T, flat_x.T @ flat_g, flat_g.sum(axis=0)


@dataclass
class LstmState:
    hidden: np.ndarray
    cell: np.ndarray

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError("LSTM hidden and cell state shapes differ")

    @classmethod
    def zeros(cls, batch, units):
        return cls(np.zeros((batch, units)), np.zeros((batch, units)))

    @property
    def batch(self):
        return self.hidden.shape[0]


def _lstm_cell(x_t, h_prev, c_prev, W, U, b):
    u = h_prev.shape[1]
    z = x_t @ W + h_prev @ U + b
    i = expit(z[:, :u])
    f = expit(z[:, u:2 * u])
    g = np.tanh(z[:, 2 * u:3 * u])
    o = expit(z[:, 3 * u:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x_t, h_prev, c_prev, i, f, g, o, tc)


def lstm_step(x_t, state, params):
    """One LSTM cell step; gate blocks are ordered input, forget, candidate, output"""
    W, U, b = params['W'], params['U'], params['b']
    if x_t.shape[1] != W.shape[0] or state.hidden.shape[1] != U.shape[0] or x_t.shape[0] != state.batch:
        raise ShapeError("LSTM step shapes are inconsistent")
    h, c, _ = _lstm_cell(x_t, state.hidden, state.cell, W, U, b)
    return h, LstmState(h, c)


def _lstm_unroll(inputs, W, U, b, state):
    batch, steps, _ = inputs.shape
    h, c = state.hidden, state.cell
    hs = np.empty((batch, steps, U.shape[0]))
    caches = []
    for t in range(steps):
        h, c, cache = _lstm_cell(inputs[:, t, :], h, c, W, U, b)
        hs[:, t, :] = h
        caches.append(cache)
    return hs, LstmState(h, c), caches


def lstm_sequence(inputs, params, initial_state=None, return_sequences=True):
    """Unroll lstm_step over [batch x T x in]; returns (outputs, final state)"""
    batch = inputs.shape[0]
    units = params['U'].shape[0]
    state = initial_state or LstmState.zeros(batch, units)
    if state.batch != batch:
        raise ShapeError(f"State batch {state.batch} does not match input batch {batch}")
    hs, final, _ = _lstm_unroll(inputs, params['W'], params['U'], params['b'], state)
    return (hs if return_sequences else hs[:, -1, :]), final


def _lstm_backward(grad_hs, caches, W, U):
    batch, steps, units = grad_hs.shape
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(W.shape[1])
    dx = np.empty((batch, steps, W.shape[0]))
    dh_next = np.zeros((batch, units))
    dc_next = np.zeros((batch, units))
    for t in reversed(range(steps)):
        x_t, h_prev, c_prev, i, f, g, o, tc = caches[t]
        dh = grad_hs[:, t, :] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                             dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1)
        dW += x_t.T @ dz
        dU += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t, :] = dz @ W.T
        dh_next = dz @ U.T
        dc_next = dc * f
    return dx, dW, dU, db


def _same_padding(kernel_size):
    left = (kernel_size - 1) // 2
    return left, kernel_size - 1 - left


def conv1d_forward(x, kernel, bias, activation='relu'):
    """Same-padded temporal cross-correlation: [batch x T x in] -> [batch x T x filters]"""
    batch, steps, channels = x.shape
    k, k_channels, filters = kernel.shape
    if k_channels != channels:
        raise ShapeError(f"Conv1D expects {k_channels} input channels, got {channels}")
    if k > steps:
        raise DataValidationError(f"Conv1D kernel of {k} is longer than the sequence ({steps})")
    left, right = _same_padding(k)
    padded = np.pad(x, ((0, 0), (left, right), (0, 0)))
    # columns[b, t, c, j] = padded[b, t + j, c]
    columns = sliding_window_view(padded, k, axis=1).reshape(batch * steps, channels * k)
    flat_kernel = kernel.transpose(1, 0, 2).reshape(channels * k, filters)
    z = (columns @ flat_kernel).reshape(batch, steps, filters) + bias
    y = relu(z) if activation == 'relu' else z
    return y, (x.shape, columns, z, kernel, activation)


def conv1d_backward(grad, cache):
    """(input grad, dK, db)"""
    x_shape, columns, z, kernel, activation = cache
    batch, steps, channels = x_shape
    k, _, filters = kernel.shape
    if activation == 'relu':
        grad = grad * (z > 0)
    flat_g = grad.reshape(batch * steps, filters)
    dK = (columns.T @ flat_g).reshape(channels, k, filters).transpose(1, 0, 2)
    db = flat_g.sum(axis=0)
    left, _ = _same_padding(k)
    d_padded = np.zeros((batch, steps + k - 1, channels))
    for j in range(k):
        d_padded[:, j:j + steps, :] += grad @ kernel[j].T
    return d_padded[:, left:left + steps, :], dK, db


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: zeros with probability rate, survivors scaled by 1/(1-rate)"""
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout(x, rate, training, rng=None):
    if not training or rate == 0:
        return x
    if rng is None:
        raise DataValidationError("Training-mode dropout needs a random generator")
    return x * dropout_mask(x.shape, rate, rng)


def adam_step(params, grads, moments, t, config):
    """Bias-corrected Adam update; returns (new params, new moments)"""
    b1, b2 = config.beta1, config.beta2
    new_params = {}
    new_moments = {}
    for name, theta in params.items():
        g = grads[name]
        m, v = moments.get(name, (np.zeros_like(theta), np.zeros_like(theta)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        new_moments[name] = (m, v)
    return new_params, new_moments


# --- layers -----------------------------------------------------------------------

class Layer:
    def __init__(self, spec, input_width):
        self.spec = spec
        self.input_width = input_width
        self.params = {}
        self.grads = {}
        self._cache = None

    @property
    def output_width(self):
        return self.spec.units

    def param_shapes(self):
        return {}

    def reset_state(self):
        pass

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class DenseLayer(Layer):
    def param_shapes(self):
        return {'W': (self.input_width, self.spec.units), 'b': (self.spec.units,)}

    def forward(self, x, training=False, rng=None):
        y, self._cache = dense_forward(x, self.params['W'], self.params['b'], self.spec.activation)
        return y

    def backward(self, grad):
        dx, self.grads['W'], self.grads['b'] = dense_backward(grad, self._cache)
        return dx


class TimeDistributedDenseLayer(DenseLayer):
    def forward(self, x, training=False, rng=None):
        if x.ndim != 3:
            raise ShapeError(f"TimeDistributedDense expects [batch x T x features], got {x.shape}")
        return super().forward(x, training, rng)


class LstmLayer(Layer):
    def __init__(self, spec, input_width):
        super().__init__(spec, input_width)
        self.state = None

    def param_shapes(self):
        u = self.spec.units
        return {'W': (self.input_width, 4 * u), 'U': (u, 4 * u), 'b': (4 * u,)}

    def reset_state(self):
        self.state = None

    def forward(self, x, training=False, rng=None):
        if x.ndim != 3:
            raise ShapeError(f"LSTM expects [batch x T x features], got {x.shape}")
        batch = x.shape[0]
        if self.spec.stateful and self.state is not None:
            if self.state.batch != batch:
                raise ShapeError(f"Persisted LSTM state has batch {self.state.batch}, input has {batch}")
            state = self.state
        else:
            state = LstmState.zeros(batch, self.spec.units)
        hs, final, caches = _lstm_unroll(x, self.params['W'], self.params['U'], self.params['b'], state)
        if self.spec.stateful:
            self.state = final
        self._cache = (caches, hs.shape)
        return hs if self.spec.return_sequences else hs[:, -1, :]

    def backward(self, grad):
        caches, hs_shape = self._cache
        if self.spec.return_sequences:
            grad_hs = grad
        else:
            grad_hs = np.zeros(hs_shape)
            grad_hs[:, -1, :] = grad
        dx, self.grads['W'], self.grads['U'], self.grads['b'] = _lstm_backward(
            grad_hs, caches, self.params['W'], self.params['U'])
        return dx


class Conv1DLayer(Layer):
    def param_shapes(self):
        return {'K': (self.spec.kernel_size, self.input_width, self.spec.units), 'b': (self.spec.units,)}

    def forward(self, x, training=False, rng=None):
        if x.ndim != 3:
            raise ShapeError(f"Conv1D expects [batch x T x features], got {x.shape}")
        y, self._cache = conv1d_forward(x, self.params['K'], self.params['b'], self.spec.activation)
        return y

    def backward(self, grad):
        dx, self.grads['K'], self.grads['b'] = conv1d_backward(grad, self._cache)
        return dx


class DropoutLayer(Layer):
    @property
    def output_width(self):
        return self.input_width

    def forward(self, x, training=False, rng=None):
        if not training or self.spec.rate == 0:
            self._cache = None
            return x
        if rng is None:
            raise DataValidationError("Training-mode dropout needs a random generator")
        self._cache = dropout_mask(x.shape, self.spec.rate, rng)
        return x * self._cache

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache


LAYER_CLASSES = {
    LayerKind.DENSE: DenseLayer,
    LayerKind.TIME_DISTRIBUTED_DENSE: TimeDistributedDenseLayer,
    LayerKind.LSTM: LstmLayer,
    LayerKind.CONV1D: Conv1DLayer,
    LayerKind.DROPOUT: DropoutLayer,
}


def build_layers(specs, input_width):
    layers = []
    width = input_width
    for spec in specs:
        layer = LAYER_CLASSES[spec.kind](spec, width)
        layers.append(layer)
        width = layer.output_width
    return layers


def _param_name(index, layer, pname):
    return f"{index:02d}_{layer.spec.kind.value.lower()}/{pname}"


@dataclass
class NetworkParams:
    """Ordered name -> float64 array mapping"""
    tensors: dict

    def __post_init__(self):
        self.tensors = {name: np.array(value, dtype=np.float64) for name, value in self.tensors.items()}

    @property
    def names(self):
        return list(self.tensors)

    def copy(self):
        return NetworkParams(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __len__(self):
        return len(self.tensors)

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def equals(self, other):
        return self.names == other.names and all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n in self.names)


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_weights(specs, input_width, seed):
    """Glorot-uniform kernels, zero biases, LSTM forget-gate bias 1"""
    specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
    rng = np.random.default_rng(seed)
    tensors = {}
    for index, layer in enumerate(build_layers(specs, input_width)):
        kind = layer.spec.kind
        shapes = layer.param_shapes()
        if kind in (LayerKind.DENSE, LayerKind.TIME_DISTRIBUTED_DENSE):
            fan_in, fan_out = shapes['W']
            tensors[_param_name(index, layer, 'W')] = _glorot(rng, shapes['W'], fan_in, fan_out)
            tensors[_param_name(index, layer, 'b')] = np.zeros(shapes['b'])
        elif kind == LayerKind.LSTM:
            u = layer.spec.units
            tensors[_param_name(index, layer, 'W')] = _glorot(rng, shapes['W'], layer.input_width, 4 * u)
            tensors[_param_name(index, layer, 'U')] = _glorot(rng, shapes['U'], u, 4 * u)
            bias = np.zeros(shapes['b'])
            bias[u:2 * u] = 1.0
            tensors[_param_name(index, layer, 'b')] = bias
        elif kind == LayerKind.CONV1D:
            k, channels, filters = shapes['K']
            tensors[_param_name(index, layer, 'K')] = _glorot(rng, shapes['K'], k * channels, k * filters)
            tensors[_param_name(index, layer, 'b')] = np.zeros(shapes['b'])
    return NetworkParams(tensors)


class Network:
    """A chain of layers with shared parameter naming, state handling and (de)serialization"""

    def __init__(self, specs, input_width, seed=0, params=None):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
        self.input_width = int(input_width)
        self.layers = build_layers(self.specs, self.input_width)
        self.set_params(params if params is not None else init_weights(self.specs, self.input_width, seed))

    @property
    def output_width(self):
        return self.layers[-1].output_width if self.layers else self.input_width

    @property
    def stateful(self):
        return any(getattr(layer.spec, 'stateful', False) for layer in self.layers)

    def _named(self, attribute):
        for index, layer in enumerate(self.layers):
            store = getattr(layer, attribute)
            for pname in layer.param_shapes():
                yield _param_name(index, layer, pname), layer, pname, store

    def forward(self, x, training=False, rng=None):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_width:
            raise ShapeError(f"Network expects {self.input_width} features, got {x.shape[-1]}")
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def reset_states(self):
        for layer in self.layers:
            layer.reset_state()

    def get_params(self):
        return NetworkParams({name: store[pname] for name, _, pname, store in self._named('params')})

    def set_params(self, params):
        """Verified copy: names and shapes must match this network exactly"""
        expected = {name: layer.param_shapes()[pname] for name, layer, pname, _ in self._named('params')}
        if list(expected) != params.names:
            raise ShapeError(f"Parameter names {params.names} do not match network {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != tuple(shape):
                raise ShapeError(f"Parameter {name} has shape {params[name].shape}, expected {tuple(shape)}")
        for name, layer, pname, _ in self._named('params'):
            layer.params[pname] = params[name].copy()

    def gradients(self):
        return {name: store[pname] for name, _, pname, store in self._named('grads')}

    def param_count(self):
        return self.get_params().count()

    def spec_chain(self):
        return [spec.to_dict() for spec in self.specs]


# --- training -----------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 42
    shuffle: bool = True
    finetune_lr_scale: float = 0.1

    @classmethod
    def from_dict(cls, data):
        return cls(**validate_config(TrainConfigForm, data, 'train config'))

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        return replace(self, **changes)


class SampleBatches:
    """Row-level minibatches over [N x features] inputs and [N x outputs] targets"""

    def __init__(self, inputs, targets):
        self.inputs = np.asarray(inputs, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError("Inputs and targets differ in row count")

    def __len__(self):
        return self.inputs.shape[0]

    def batches(self, rng=None, batch_size=128, shuffle=False):
        n = len(self)
        order = rng.permutation(n) if shuffle and rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.inputs[idx], self.targets[idx]


class SequenceBatches:
    """Whole sequences; sequences of equal length are stacked up to batch_size"""

    def __init__(self, sequences, allow_shuffle=True, max_batch=None):
        self.sequences = [(np.asarray(x, dtype=float), np.asarray(y, dtype=float)) for x, y in sequences]
        self.allow_shuffle = allow_shuffle
        self.max_batch = max_batch

    def __len__(self):
        return len(self.sequences)

    def batches(self, rng=None, batch_size=1, shuffle=False):
        n = len(self.sequences)
        if shuffle and self.allow_shuffle and rng is not None:
            order = rng.permutation(n)
        else:
            order = np.arange(n)
        if self.max_batch is not None:
            batch_size = min(batch_size, self.max_batch)
        buckets = {}
        for i in order:
            buckets.setdefault(self.sequences[i][0].shape[0], []).append(i)
        # walk in the order each length first appears
        for i in order:
            length = self.sequences[i][0].shape[0]
            bucket = buckets.get(length)
            if not bucket or bucket[0] != i:
                continue
            chunk = bucket[:batch_size]
            buckets[length] = bucket[batch_size:]
            yield (np.stack([self.sequences[j][0] for j in chunk]),
                   np.stack([self.sequences[j][1] for j in chunk]))


class EarlyStopping:
    """Stop after `patience` epochs without improvement; remember the best weights"""

    def __init__(self, patience=5):
        if patience < 1:
            raise DataValidationError(f"Patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = None
        self.best_params = None
        self.wait = 0

    def update(self, epoch, loss, snapshot=None):
        """Record an epoch's validation loss; True means stop"""
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_params = snapshot() if snapshot else None
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


def evaluate_loss(network, source, batch_size=128):
    """Element-weighted MSE of the network over a batch source (inference mode)"""
    network.reset_states()
    total = 0.0
    count = 0
    for x, y in source.batches(None, batch_size, False):
        pred = network.forward(x, training=False)
        loss, _ = mse_loss(pred, y)
        total += loss * y.size
        count += y.size
    network.reset_states()
    return total / count


def fit(network, train, val, config, on_epoch_end=None):
    """Minibatch Adam with early stopping; returns (best NetworkParams, history)"""
    if len(train) == 0 or len(val) == 0:
        raise DataValidationError("fit needs non-empty training and validation data")
    history = []
    if config.max_epochs == 0:
        return network.get_params(), history
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.patience)
    moments = {}
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        network.reset_states()
        total = 0.0
        count = 0
        for x, y in train.batches(rng, config.batch_size, config.shuffle):
            pred = network.forward(x, training=True, rng=rng)
            loss, grad = mse_loss(pred, y)
            network.backward(grad)
            step += 1
            params = {name: arr for name, arr in network.get_params().tensors.items()}
            updated, moments = adam_step(params, network.gradients(), moments, step, config)
            network.set_params(NetworkParams(updated))
            total += loss * y.size
            count += y.size
            logger.debug(f"epoch {epoch} step {step}: batch loss {loss:.6g}")
        val_loss = evaluate_loss(network, val, config.batch_size)
        history.append({'epoch': epoch, 'train_loss': total / count, 'val_loss': val_loss})
        logger.info(f"Epoch {epoch}/{config.max_epochs}: train {total / count:.6g}, val {val_loss:.6g}")
        stop = stopper.update(epoch, val_loss, network.get_params)
        if on_epoch_end is not None and on_epoch_end(epoch, val_loss):
            logger.info(f"Training stopped by callback after epoch {epoch}")
            stop = True
        if stop:
            break
    if stopper.best_params is not None:
        network.set_params(stopper.best_params)
        logger.info(f"Restored weights of epoch {stopper.best_epoch} (val {stopper.best_loss:.6g})")
    network.reset_states()
    return network.get_params(), history


# --- weight files -------------------------------------------------------------------

def save_params(path, params, header=None):
    """JSON container: header plus base64 little-endian float64 tensors in declared order"""
    payload = {
        'format': WEIGHTS_FORMAT,
        'version': WEIGHTS_VERSION,
        'header': header or {},
        'tensors': [
            {
                'name': name,
                'shape': list(array.shape),
                'data': base64.b64encode(np.ascontiguousarray(array, dtype='<f8').tobytes()).decode('ascii'),
            }
            for name, array in params.tensors.items()
        ],
    }
    return write_json_atomic(path, payload)


def load_params(path):
    """(NetworkParams, header) from a weight file"""
    payload = read_json(path, 'weights file')
    if payload.get('format') != WEIGHTS_FORMAT:
        raise DataValidationError(f"{path} is not a weights file")
    if payload.get('version') != WEIGHTS_VERSION:
        raise DataValidationError(f"Unsupported weights version {payload.get('version')}")
    tensors = {}
    for entry in payload['tensors']:
        raw = base64.b64decode(entry['data'])
        tensors[entry['name']] = np.frombuffer(raw, dtype='<f8').reshape(entry['shape']).astype(np.float64)
    return NetworkParams(tensors), payload.get('header', {})
