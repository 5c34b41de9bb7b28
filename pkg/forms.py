"""
Validation forms for the JSON configuration files each command reads
"""
import logging
from wtforms import Form, BooleanField, FloatField, IntegerField, SelectField
from wtforms.validators import NumberRange, ValidationError
from utils import ConfigError

logger = logging.getLogger(__name__)


class RealField(FloatField):
    """Float field that coerces plain (non-form) data the way IntegerField does"""

    def process_data(self, value):
        if value is None:
            self.data = None
            return
        try:
            self.data = float(value)
        except (ValueError, TypeError) as exc:
            self.data = None
            raise ValueError('Not a valid float value.') from exc


class PipelineConfigForm(Form):
    rms_window_ms = RealField('RMS window (ms)', validators=[NumberRange(min=1e-6)], default=200.0)
    out_rate_hz = RealField('Output rate (Hz)', validators=[NumberRange(min=1e-6)], default=60.0)
    savgol_window = IntegerField('Savitzky-Golay window', validators=[NumberRange(min=1)], default=31)
    savgol_order = IntegerField('Savitzky-Golay order', validators=[NumberRange(min=0)], default=3)
    outlier_k_sigma = RealField('Outlier threshold (sigma)', validators=[NumberRange(min=1e-6)], default=6.0)
    rest_s = RealField('Fallback rest window (s)', validators=[NumberRange(min=1e-6)], default=1.0)
    normalization_scope = SelectField('Normalization scope', choices=[
        ('train', 'Train split only'),
        ('all', 'All subject data')
    ], default='train')

    def validate_savgol_window(self, field):
        if field.data is None:
            return
        if field.data % 2 == 0:
            raise ValidationError('Window length must be odd.')
        if self.savgol_order.data is not None and field.data <= self.savgol_order.data:
            raise ValidationError('Window length must exceed the polynomial order.')


class TrainConfigForm(Form):
    batch_size = IntegerField('Batch size', validators=[NumberRange(min=1)], default=128)
    max_epochs = IntegerField('Max epochs', validators=[NumberRange(min=0)], default=100)
    patience = IntegerField('Patience', validators=[NumberRange(min=1)], default=5)
    learning_rate = RealField('Learning rate', validators=[NumberRange(min=0)], default=0.001)
    beta1 = RealField('Adam beta1', validators=[NumberRange(min=0)], default=0.9)
    beta2 = RealField('Adam beta2', validators=[NumberRange(min=0)], default=0.999)
    epsilon = RealField('Adam epsilon', validators=[NumberRange(min=0)], default=1e-7)
    seed = IntegerField('Seed', validators=[NumberRange(min=0)], default=42)
    shuffle = BooleanField('Shuffle', default=True)
    finetune_lr_scale = RealField('Fine-tune learning rate scale', validators=[NumberRange(min=0)], default=0.1)

    def validate_learning_rate(self, field):
        if field.data is not None and field.data <= 0:
            raise ValidationError('Learning rate must be positive.')

    def validate_beta1(self, field):
        if field.data is not None and not field.data < 1:
            raise ValidationError('beta1 must lie in [0, 1).')

    def validate_beta2(self, field):
        if field.data is not None and not field.data < 1:
            raise ValidationError('beta2 must lie in [0, 1).')

    def validate_epsilon(self, field):
        if field.data is not None and field.data <= 0:
            raise ValidationError('epsilon must be positive.')

    def validate_finetune_lr_scale(self, field):
        if field.data is not None and field.data <= 0:
            raise ValidationError('Fine-tune scale must be positive.')


class ArchitectureConfigForm(Form):
    arch_id = SelectField('Architecture', choices=[
        ('rnn', 'RNN'),
        ('rnnseq', 'RNNseq'),
        ('fnn', 'FNN'),
        ('fnnseq', 'FNNseq'),
        ('cnn', 'CNN')
    ], default='rnn')
    feature_width = IntegerField('Feature width', validators=[NumberRange(min=1)], default=18)
    input_dropout = RealField('Input dropout', validators=[NumberRange(min=0, max=0.99)], default=0.1)
    hidden_dropout = RealField('Hidden dropout', validators=[NumberRange(min=0, max=0.99)], default=0.0)
    rnnseq_units = IntegerField('RNNseq LSTM units', validators=[NumberRange(min=1)], default=128)
    warmup_k = IntegerField('Warm-up exponent', validators=[NumberRange(min=0, max=16)], default=5)


class SynthConfigForm(Form):
    n_subjects = IntegerField('Subjects', validators=[NumberRange(min=1)], default=5)
    n_motions = IntegerField('Motions', validators=[NumberRange(min=2, max=20)], default=20)
    n_reps = IntegerField('Repetitions', validators=[NumberRange(min=1)], default=18)
    seed = IntegerField('Seed', validators=[NumberRange(min=0)], default=42)
    rest_s = RealField('Rest lead-in (s)', validators=[NumberRange(min=0)], default=1.0)
    motion_s = RealField('Movement duration (s)', validators=[NumberRange(min=0.1)], default=3.0)
    jitter = RealField('Repetition jitter', validators=[NumberRange(min=0, max=0.5)], default=0.05)
    tau_ms = RealField('Activation time constant (ms)', validators=[NumberRange(min=1e-3)], default=60.0)
    noise = RealField('Noise level', validators=[NumberRange(min=0)], default=0.005)
    motion_rate_hz = RealField('Motion rate (Hz)', validators=[NumberRange(min=1)], default=60.0)
    emg_rate_hz = RealField('Raw EMG rate (Hz)', validators=[NumberRange(min=1)], default=2222.0)
    raw_emg = BooleanField('Raw EMG carrier', default=False)

    def validate_emg_rate_hz(self, field):
        if self.raw_emg.data and field.data is not None and self.motion_rate_hz.data is not None \
                and field.data < self.motion_rate_hz.data:
            raise ValidationError('Raw EMG rate must be at least the motion rate.')


class TunerConfigForm(Form):
    population = IntegerField('Population', validators=[NumberRange(min=1)], default=8)
    budget = IntegerField('Budget', validators=[NumberRange(min=1)], default=20)
    mutation_prob = RealField('Mutation probability', validators=[NumberRange(min=0, max=1)], default=0.3)
    max_epochs = IntegerField('Epochs per candidate', validators=[NumberRange(min=1)], default=8)

    def validate_budget(self, field):
        if field.data is not None and self.population.data is not None and field.data < self.population.data:
            raise ValidationError('Budget must be at least the population size.')


def validate_config(form_class, data, what='config'):
    """Validate a config dict with form_class; return the cleaned values"""
    data = dict(data or {})
    form = form_class(data=data)
    unknown = sorted(set(data) - set(form._fields))
    if unknown:
        logger.warning(f"Ignoring unknown {what} keys: {unknown}")
    if not form.validate():
        details = '; '.join(f"{name}: {', '.join(errs)}" for name, errs in sorted(form.errors.items()))
        raise ConfigError(f"Invalid {what}: {details}", form.errors)
    return dict(form.data)
