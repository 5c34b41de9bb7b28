"""
Command-line subcommands: synth, preprocess, train, finetune, evaluate,
predict, tune, plotdata.

Exit codes: 0 success, 1 invalid config or data, 2 missing artifact,
3 internal invariant violation or unexpected failure.
"""
import os
import json
import time
import logging
import click
import numpy as np
import pandas as pd
from app import __version__, config as app_config, registry_url_for
from architectures import ArchitectureConfig, ArchitectureId, load_model, save_model
from dataset_io import (read_dataset, read_feature_csv, read_processed, read_signal_csv,
                        write_prediction_csv, write_processed)
from evaluation import AGGREGATIONS, LAYOUTS, EvaluationReport, evaluate, render_table
from forms import TunerConfigForm, validate_config
from nn_engine import TrainConfig
from pdf_generator import write_report_pdf
from regimes import (RegimeId, SplitRole, audit_split, finetune, make_split, plan_subjects,
                     train_general, train_subject_specific)
from signal_pipeline import EMG_CHANNELS, InputVariant, PipelineConfig, process_dataset
from synthetic_data import SynthConfig, gen_dataset
from tuner import tune as run_tuner
from utils import (ConfigError, DataValidationError, InvariantViolation, MissingArtifactError, log_run,
                   read_json, require_file, write_json_atomic)

logger = logging.getLogger(__name__)

RUN_MANIFEST = 'run_manifest.json'


class ExitCodeGroup(click.Group):
    """Maps the toolkit's exceptions onto the documented exit codes"""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort):
            raise
        except click.UsageError as e:
            e.show()
            ctx.exit(1)
        except DataValidationError as e:
            logger.error(f"Invalid input: {str(e)}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(1)
        except MissingArtifactError as e:
            logger.error(f"Missing artifact: {str(e)}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(2)
        except InvariantViolation as e:
            logger.error(f"Invariant violated: {str(e)}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(3)
        except Exception as e:
            logger.exception(f"Unexpected failure: {str(e)}")
            click.echo(f"Error: {e}", err=True)
            ctx.exit(3)


def load_config_file(path):
    """Config file contents, {} without a path"""
    if not path:
        return {}
    try:
        data = read_json(path, 'config file')
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _overrides(data, **flags):
    merged = dict(data)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _seed(seed):
    return app_config['DEFAULT_SEED'] if seed is None else seed


def finish_run(out_dir, command, config_snapshot, inputs, outputs, seed, started):
    """Write run_manifest.json atomically and record the run in the registry"""
    duration = time.time() - started
    manifest = {
        'command': command,
        'config': config_snapshot,
        'inputs': inputs,
        'outputs': outputs,
        'seed': seed,
        'version': __version__,
        'duration_s': round(duration, 3),
    }
    write_json_atomic(os.path.join(out_dir, RUN_MANIFEST), manifest)
    log_run(out_dir, command, config_snapshot, inputs, outputs, seed, duration)
    logger.info(f"{command} finished in {duration:.1f}s; outputs in {out_dir}")
    return manifest


def config_option(f):
    return click.option('--config', 'config_path', type=click.Path(), default=None,
                        help='JSON config file')(f)


def seed_option(f):
    return click.option('--seed', type=int, default=None, help='Master seed (default 42)')(f)


def out_option(f):
    return click.option('--out', 'out_dir', type=click.Path(), required=True, help='Output directory')(f)


@click.group(cls=ExitCodeGroup)
@click.version_option(__version__, prog_name='myosynth')
def cli():
    """Learn and generate artificial surface EMG from arm motion."""


@cli.command()
@config_option
@seed_option
@out_option
@click.option('--raw-emg/--envelope-emg', default=None, help='Write 2222 Hz raw EMG instead of envelopes')
def synth(config_path, seed, out_dir, raw_emg):
    """Generate a synthetic dataset."""
    started = time.time()
    data = _overrides(load_config_file(config_path), seed=seed, raw_emg=raw_emg)
    config = SynthConfig.from_dict(data)
    os.makedirs(out_dir, exist_ok=True)
    manifest = gen_dataset(out_dir, config)
    click.echo(f"Wrote {len(manifest['trials'])} trials to {out_dir}")
    finish_run(out_dir, 'synth', config.to_dict(), {}, {'manifest': 'manifest.json'}, config.seed, started)


def _norm_trial_ids(manifest, split_seed):
    """Train-split trials of every subject (per-subject plans)"""
    ids = []
    for subject in manifest.get('subjects') or sorted({e['subject_id'] for e in manifest['trials']}):
        plan = make_split(manifest, manifest.get('held_out_subject'), manifest.get('new_motion'),
                          split_seed, subject=subject)
        ids += plan.train
    return ids


@cli.command()
@click.argument('raw_dir', type=click.Path())
@click.option('--input', 'variant', type=click.Choice([v.value for v in InputVariant]), default='all')
@click.option('--norm-scope', type=click.Choice(['train', 'all']), default=None,
              help='Fit normalization on train-split trials or all trials of a subject')
@config_option
@seed_option
@out_option
def preprocess(raw_dir, variant, norm_scope, config_path, seed, out_dir):
    """Raw trials to normalized feature/target sequences."""
    started = time.time()
    seed = _seed(seed)
    config = PipelineConfig.from_dict(_overrides(load_config_file(config_path), normalization_scope=norm_scope))
    manifest, trials = read_dataset(raw_dir)
    norm_ids = _norm_trial_ids(manifest, seed) if config.normalization_scope == 'train' else None
    dataset = process_dataset(trials, variant, config, norm_ids)
    dataset.info['split_seed'] = seed
    write_processed(out_dir, dataset, manifest)
    click.echo(f"Processed {len(dataset.trials)} trials ({variant}) into {out_dir}")
    finish_run(out_dir, 'preprocess', {'pipeline': config.to_dict(), 'input': variant}, {'raw': raw_dir},
               {'processed': 'processed.json'}, seed, started)


def _load_dataset(dataset_dir):
    dataset, manifest = read_processed(dataset_dir)
    if not manifest:
        raise DataValidationError(f"{dataset_dir}: processed dataset carries no manifest")
    return dataset, manifest


def _configs(config_data, arch, feature_width, seed, max_epochs=None, base_arch=None):
    arch_data = dict(base_arch or {})
    arch_data.update(config_data.get('architecture', {}))
    arch_data = _overrides(arch_data, arch_id=arch, feature_width=feature_width)
    train_data = _overrides(config_data.get('train', {}), seed=seed, max_epochs=max_epochs)
    return ArchitectureConfig.from_dict(arch_data), TrainConfig.from_dict(train_data)


def _plan_for(manifest, regime, subject, split_seed):
    held_out_subject = manifest.get('held_out_subject')
    held_out_motion = manifest.get('new_motion')
    if regime == RegimeId.GENERAL:
        plan = make_split(manifest, held_out_subject, held_out_motion, split_seed)
    else:
        subject = subject or held_out_subject
        if subject is None:
            raise ConfigError(f"Regime {regime.value} needs --subject")
        plan = make_split(manifest, held_out_subject, held_out_motion, split_seed, subject=subject)
    audit_split(plan, manifest)
    return plan


def _write_training_outputs(out_dir, model, history, plan, header):
    os.makedirs(out_dir, exist_ok=True)
    save_model(os.path.join(out_dir, 'weights.json'), model, header)
    pd.DataFrame(history, columns=['epoch', 'train_loss', 'val_loss']).to_csv(
        os.path.join(out_dir, 'history.csv'), index=False, float_format='%.17g')
    write_json_atomic(os.path.join(out_dir, 'split.json'), plan.to_dict())
    return {'weights': 'weights.json', 'history': 'history.csv', 'split': 'split.json'}


def _run_training(dataset_dir, arch, regime, subject, weights, config_path, seed, out_dir, max_epochs,
                  command):
    started = time.time()
    seed_flag, seed = seed, _seed(seed)
    regime = RegimeId(regime)
    dataset, manifest = _load_dataset(dataset_dir)
    config_data = load_config_file(config_path)
    split_seed = config_data.get('split_seed', dataset.info.get('split_seed', seed))
    general_header = None
    if regime == RegimeId.PRETRAIN:
        if not weights:
            raise ConfigError("Fine-tuning needs --weights")
        general_model, general_header = load_model(require_file(weights, 'weights file'))
        arch = arch or general_model.arch_id.value
    base_arch = general_header['architecture'] if general_header else None
    arch_config, train_config = _configs(config_data, arch, dataset.feature_width, seed_flag, max_epochs,
                                         base_arch)
    plan = _plan_for(manifest, regime, subject, split_seed)

    if regime == RegimeId.GENERAL:
        model, _, history = train_general(dataset, plan, arch_config, train_config)
    elif regime == RegimeId.SUBJECT_SPECIFIC:
        model, _, history = train_subject_specific(dataset, plan, arch_config, train_config)
    else:
        model, _, history = finetune(general_model.get_params(), arch_config, dataset, plan, train_config,
                                     header=general_header)
    header = {
        'regime': regime.value,
        'subject': plan.subject,
        'subjects': plan_subjects(plan, dataset),
        'held_out_subject': plan.held_out_subject,
        'held_out_motion': plan.held_out_motion,
        'input': dataset.variant.value,
        'split_seed': split_seed,
        'same_subject_test': plan.same_subject_test,
        'train_config': train_config.to_dict(),
    }
    outputs = _write_training_outputs(out_dir, model, history, plan, header)
    best = min(history, key=lambda h: h['val_loss']) if history else None
    click.echo(f"Trained {arch_config.arch_id.value} ({regime.value}); "
               + (f"best val loss {best['val_loss']:.6g} at epoch {best['epoch']}" if best else "no epochs run"))
    snapshot = {'architecture': arch_config.to_dict(), 'train': train_config.to_dict(), 'regime': regime.value,
                'subject': plan.subject, 'split_seed': split_seed}
    inputs = {'dataset': dataset_dir, 'weights': weights}
    finish_run(out_dir, command, snapshot, inputs, outputs, seed, started)


@cli.command()
@click.argument('dataset_dir', type=click.Path())
@click.option('--arch', type=click.Choice([a.value for a in ArchitectureId]), default=None)
@click.option('--regime', type=click.Choice([r.value for r in RegimeId]), default='general')
@click.option('--subject', default=None, help='Subject for subject-specific or pretrain regimes')
@click.option('--weights', type=click.Path(), default=None, help='General weights for --regime pretrain')
@click.option('--max-epochs', type=int, default=None)
@config_option
@seed_option
@out_option
def train(dataset_dir, arch, regime, subject, weights, max_epochs, config_path, seed, out_dir):
    """Train a model under one of the training regimes."""
    _run_training(dataset_dir, arch, regime, subject, weights, config_path, seed, out_dir, max_epochs, 'train')


@cli.command('finetune')
@click.argument('dataset_dir', type=click.Path())
@click.option('--weights', type=click.Path(), required=True, help='General weights file')
@click.option('--subject', default=None, help='Target subject (default: the held-out subject)')
@click.option('--max-epochs', type=int, default=None)
@config_option
@seed_option
@out_option
def finetune_command(dataset_dir, weights, subject, max_epochs, config_path, seed, out_dir):
    """Fine-tune general weights on one subject."""
    _run_training(dataset_dir, None, RegimeId.PRETRAIN.value, subject, weights, config_path, seed, out_dir,
                  max_epochs, 'finetune')


def _evaluation_plan(manifest, header, subject, split_seed):
    subject = subject or header.get('subject')
    if subject is None:
        plan = make_split(manifest, header.get('held_out_subject'), header.get('held_out_motion'), split_seed)
    else:
        plan = make_split(manifest, header.get('held_out_subject'), header.get('held_out_motion'), split_seed,
                          subject=subject)
    audit_split(plan, manifest)
    return plan


@cli.command('evaluate')
@click.argument('dataset_dir', type=click.Path())
@click.option('--weights', type=click.Path(), required=True)
@click.option('--split', 'split_role', type=click.Choice([r.value for r in SplitRole]), default='test')
@click.option('--subject', default=None, help='Evaluate on this subject\'s split')
@click.option('--layout', type=click.Choice(LAYOUTS), default='architectures')
@click.option('--aggregation', type=click.Choice(AGGREGATIONS), default='concatenate')
@click.option('--report', 'extra_reports', type=click.Path(), multiple=True,
              help='Earlier report.json files to include in the table')
@click.option('--pdf', is_flag=True, help='Also write report.pdf')
@seed_option
@out_option
def evaluate_command(dataset_dir, weights, split_role, subject, layout, aggregation, extra_reports, pdf, seed,
                     out_dir):
    """Score weights on a split and render a results table."""
    started = time.time()
    require_file(weights, 'weights file')
    extra = [EvaluationReport.load(require_file(path, 'report')) for path in extra_reports]
    dataset, manifest = _load_dataset(dataset_dir)
    model, header = load_model(weights)
    split_seed = header.get('split_seed', dataset.info.get('split_seed', _seed(seed)))
    plan = _evaluation_plan(manifest, header, subject, split_seed)
    trial_ids = plan.ids(split_role)
    metadata = {
        'arch': model.arch_id.value,
        'regime': header.get('regime', '-'),
        'input': dataset.variant.value,
        'split': split_role,
        'subject': plan.subject or 'all',
        'weights': os.path.abspath(weights),
    }
    report = evaluate(model, dataset, trial_ids, metadata, aggregation)
    os.makedirs(out_dir, exist_ok=True)
    report.save(os.path.join(out_dir, 'report.json'))
    table = render_table(extra + [report], layout)
    table.write(os.path.join(out_dir, 'table.csv'), os.path.join(out_dir, 'table.txt'))
    outputs = {'report': 'report.json', 'table_csv': 'table.csv', 'table_text': 'table.txt'}
    if pdf:
        write_report_pdf(os.path.join(out_dir, 'report.pdf'), table,
                         notes=[f"Split: {split_role}; aggregation: {aggregation}"])
        outputs['pdf'] = 'report.pdf'
    click.echo(table.text)
    finish_run(out_dir, 'evaluate', {'split': split_role, 'layout': layout, 'aggregation': aggregation,
                                     'subject': plan.subject, 'split_seed': split_seed},
               {'dataset': dataset_dir, 'weights': weights, 'reports': list(extra_reports)}, outputs,
               split_seed, started)


@cli.command()
@click.argument('features_csv', type=click.Path())
@click.option('--weights', type=click.Path(), required=True)
@click.option('--online', is_flag=True, help='Step-by-step prediction (RNNseq only)')
@seed_option
@out_option
def predict(features_csv, weights, online, seed, out_dir):
    """Predict EMG for a feature CSV."""
    started = time.time()
    model, header = load_model(require_file(weights, 'weights file'))
    features = read_feature_csv(require_file(features_csv, 'feature CSV'))
    if features.n_channels != model.config.feature_width:
        raise DataValidationError(f"Feature CSV has {features.n_channels} columns, "
                                  f"model expects {model.config.feature_width}")
    if online:
        if model.arch_id != ArchitectureId.RNNSEQ:
            raise DataValidationError("--online prediction needs RNNseq weights")
        predictions = model.predict_online(features.samples)
    else:
        predictions = model.predict(features.samples)
    os.makedirs(out_dir, exist_ok=True)
    write_prediction_csv(os.path.join(out_dir, 'predictions.csv'), predictions, features.rate_hz)
    click.echo(f"Predicted {predictions.shape[0]} samples")
    finish_run(out_dir, 'predict', {'online': online, 'arch': model.arch_id.value},
               {'features': features_csv, 'weights': weights}, {'predictions': 'predictions.csv'}, _seed(seed),
               started)


@cli.command('tune')
@click.argument('dataset_dir', type=click.Path())
@click.option('--arch', type=click.Choice([a.value for a in ArchitectureId]), default=None)
@click.option('--budget', type=int, default=None)
@click.option('--population', type=int, default=None)
@config_option
@seed_option
@out_option
def tune_command(dataset_dir, arch, budget, population, config_path, seed, out_dir):
    """Evolutionary hyperparameter search with median pruning."""
    started = time.time()
    seed_flag, seed = seed, _seed(seed)
    config_data = load_config_file(config_path)
    tuner_config = validate_config(TunerConfigForm, _overrides(config_data.get('tuner', {}), budget=budget,
                                                               population=population), 'tuner config')
    dataset, manifest = _load_dataset(dataset_dir)
    split_seed = config_data.get('split_seed', dataset.info.get('split_seed', seed))
    arch_config, train_config = _configs(config_data, arch, dataset.feature_width, seed_flag)
    plan = _plan_for(manifest, RegimeId.GENERAL, None, split_seed)
    search_space = config_data.get('search_space')
    best, results, tuner = run_tuner(dataset, plan, arch_config, train_config, search_space,
                                     population=tuner_config['population'], budget=tuner_config['budget'],
                                     seed=seed, mutation_prob=tuner_config['mutation_prob'],
                                     max_epochs=tuner_config['max_epochs'],
                                     study=f"{arch_config.arch_id.value}-{seed}")
    os.makedirs(out_dir, exist_ok=True)
    tuner.export_csv(os.path.join(out_dir, 'trials.csv'))
    tuner.save_trials(registry_url_for(out_dir))
    best_score = tuner.incumbent().score
    write_json_atomic(os.path.join(out_dir, 'best_config.json'), {'candidate': best, 'val_loss': best_score})
    click.echo(f"Best of {len(results)} candidates (val loss {best_score:.6g}): {best}")
    finish_run(out_dir, 'tune', {'tuner': tuner_config, 'architecture': arch_config.to_dict(),
                                 'train': train_config.to_dict(), 'search_space': tuner.space},
               {'dataset': dataset_dir}, {'best': 'best_config.json', 'trials': 'trials.csv'}, seed, started)


@cli.command()
@click.argument('prediction_csv', type=click.Path())
@click.option('--target', 'target_csv', type=click.Path(), required=True, help='Original EMG CSV')
@out_option
def plotdata(prediction_csv, target_csv, out_dir):
    """Long-format (time, channel, original, predicted) CSV for overlay plots."""
    started = time.time()
    predicted = read_signal_csv(require_file(prediction_csv, 'prediction CSV'), None, EMG_CHANNELS)
    original = read_signal_csv(require_file(target_csv, 'target CSV'), None, EMG_CHANNELS)
    n = min(predicted.n_samples, original.n_samples)
    if predicted.n_samples != original.n_samples:
        logger.warning(f"Prediction has {predicted.n_samples} samples, target {original.n_samples}; using {n}")
    times = np.arange(n) / original.rate_hz
    frame = pd.DataFrame({
        'time': np.repeat(times, len(EMG_CHANNELS)),
        'channel': np.tile(EMG_CHANNELS, n),
        'original': original.samples[:n].ravel(),
        'predicted': predicted.samples[:n].ravel(),
    })
    os.makedirs(out_dir, exist_ok=True)
    frame.to_csv(os.path.join(out_dir, 'plotdata.csv'), index=False, float_format='%.17g')
    click.echo(f"Wrote {len(frame)} rows")
    finish_run(out_dir, 'plotdata', {}, {'prediction': prediction_csv, 'target': target_csv},
               {'plotdata': 'plotdata.csv'}, None, started)
