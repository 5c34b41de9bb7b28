"""
Repetition-level data splits and the three training regimes:

    general           fit on the train split of every non-held-out subject
    pretrain          continue from general weights on one subject's data
    subject-specific  fit from scratch on one subject's data
"""
import enum
import logging
from collections import defaultdict
from dataclasses import dataclass, asdict, field
from architectures import ArchitectureConfig, build_model
from nn_engine import fit
from utils import DataValidationError, InvariantViolation, ShapeError, derive_rng

logger = logging.getLogger(__name__)

# repetitions per (subject, motion) that go to train, test and validation
SPLIT_COUNTS = (15, 2, 1)


class RegimeId(str, enum.Enum):
    GENERAL = 'general'
    PRETRAIN = 'pretrain'
    SUBJECT_SPECIFIC = 'subject'


class SplitRole(str, enum.Enum):
    TRAIN = 'train'
    VAL = 'val'
    TEST = 'test'
    NEW_MOTION = 'new-motion'


@dataclass
class SplitPlan:
    train: list
    val: list
    test: list
    held_out_subject: str = None
    held_out_motion: str = None
    subject: str = None
    seed: int = 42
    counts: tuple = SPLIT_COUNTS
    # the general model is tested on unseen repetitions of its own training subjects
    same_subject_test: bool = True
    new_motion: list = field(default_factory=list)

    def ids(self, role):
        role = SplitRole(role)
        if role == SplitRole.NEW_MOTION:
            return list(self.new_motion)
        return list(getattr(self, role.value))

    def to_dict(self):
        data = asdict(self)
        data['counts'] = list(self.counts)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['counts'] = tuple(data.get('counts', SPLIT_COUNTS))
        return cls(**data)


def _manifest_trials(manifest):
    grouped = defaultdict(dict)
    for entry in manifest['trials']:
        grouped[(entry['subject_id'], entry['motion_id'])][int(entry['repetition'])] = entry['trial_id']
    return grouped


def _subjects(manifest):
    return manifest.get('subjects') or sorted({e['subject_id'] for e in manifest['trials']})


def _motions(manifest):
    if manifest.get('motions'):
        return list(manifest['motions'])
    motions = []
    for entry in manifest['trials']:
        if entry['motion_id'] not in motions:
            motions.append(entry['motion_id'])
    return motions


def new_motion_trials(manifest, held_out_motion, subjects=None):
    """Every repetition of the held-out motion, for the given subjects (default all)"""
    if held_out_motion is None:
        return []
    wanted = None if subjects is None else set(subjects)
    return sorted(
        entry['trial_id'] for entry in manifest['trials']
        if entry['motion_id'] == held_out_motion and (wanted is None or entry['subject_id'] in wanted)
    )


def make_split(manifest, held_out_subject=None, held_out_motion=None, seed=42, subject=None,
               counts=SPLIT_COUNTS):
    """
    Assign each (subject, motion)'s repetitions to train/test/val.

    The assignment of one (subject, motion) depends only on seed and that pair,
    so a per-subject plan (subject=S) reuses exactly the repetitions the general
    plan would give S.
    """
    subjects = _subjects(manifest)
    motions = _motions(manifest)
    for name, value, known in (('subject', held_out_subject, subjects), ('motion', held_out_motion, motions),
                               ('subject', subject, subjects)):
        if value is not None and value not in known:
            raise DataValidationError(f"Unknown {name} {value}")
    n_train, n_test, n_val = counts
    n_reps = n_train + n_test + n_val
    grouped = _manifest_trials(manifest)

    if subject is None:
        plan_subjects = [s for s in subjects if s != held_out_subject]
    else:
        plan_subjects = [subject]
    plan_motions = [m for m in motions if m != held_out_motion]

    gaps = []
    for s in plan_subjects:
        for m in plan_motions:
            missing = sorted(set(range(1, n_reps + 1)) - set(grouped.get((s, m), {})))
            if missing:
                gaps.append(f"{s}/{m} reps {missing}")
    if gaps:
        raise DataValidationError(f"Missing repetitions: {'; '.join(gaps[:10])}"
                                  + (f" (+{len(gaps) - 10} more)" if len(gaps) > 10 else ''))

    train, val, test = [], [], []
    for s in plan_subjects:
        for m in plan_motions:
            rng = derive_rng(seed, subjects.index(s), motions.index(m))
            reps = [int(r) + 1 for r in rng.permutation(n_reps)]
            ids = grouped[(s, m)]
            train += [ids[r] for r in sorted(reps[:n_train])]
            test += [ids[r] for r in sorted(reps[n_train:n_train + n_test])]
            val += [ids[r] for r in sorted(reps[n_train + n_test:])]

    plan = SplitPlan(
        train=train, val=val, test=test,
        held_out_subject=held_out_subject,
        held_out_motion=held_out_motion,
        subject=subject,
        seed=seed,
        counts=tuple(counts),
        new_motion=new_motion_trials(manifest, held_out_motion, plan_subjects),
    )
    logger.info(f"Split ({'general' if subject is None else subject}): {len(train)} train, "
                f"{len(val)} val, {len(test)} test, {len(plan.new_motion)} new-motion trials")
    return plan


def audit_split(plan, manifest):
    """Raise InvariantViolation unless the plan's roles are disjoint and honour the hold-outs"""
    by_id = {e['trial_id']: e for e in manifest['trials']}
    roles = {'train': plan.train, 'val': plan.val, 'test': plan.test}
    seen = {}
    for role, ids in roles.items():
        if len(set(ids)) != len(ids):
            raise InvariantViolation(f"Duplicate trial ids inside the {role} split")
        for tid in ids:
            if tid not in by_id:
                raise InvariantViolation(f"Trial {tid} in {role} split is not in the manifest")
            if tid in seen:
                raise InvariantViolation(f"Trial {tid} appears in both {seen[tid]} and {role}")
            seen[tid] = role
    counts = defaultdict(lambda: [0, 0, 0])
    for tid, role in seen.items():
        entry = by_id[tid]
        if plan.held_out_motion is not None and entry['motion_id'] == plan.held_out_motion:
            raise InvariantViolation(f"Held-out motion trial {tid} found in {role} split")
        if plan.subject is None and plan.held_out_subject is not None \
                and entry['subject_id'] == plan.held_out_subject:
            raise InvariantViolation(f"Held-out subject trial {tid} found in {role} split")
        if plan.subject is not None and entry['subject_id'] != plan.subject:
            raise InvariantViolation(f"Trial {tid} of another subject in a {plan.subject} plan")
        counts[(entry['subject_id'], entry['motion_id'])][('train', 'test', 'val').index(role)] += 1
    expected = list(plan.counts)
    for key, found in counts.items():
        if found != expected:
            raise InvariantViolation(f"{key[0]}/{key[1]}: train/test/val counts {found}, expected {expected}")
    for tid in plan.new_motion:
        if tid in seen:
            raise InvariantViolation(f"New-motion trial {tid} also in the {seen[tid]} split")
    return True


def _fit_model(model, dataset, plan, train_config, on_epoch_end=None):
    train_config = model.adjust_train_config(train_config)
    train = model.batch_source(dataset.sequences(plan.train))
    val = model.batch_source(dataset.sequences(plan.val))
    params, history = fit(model.network, train, val, train_config, on_epoch_end)
    return model, params, history


def _check_subjects(dataset, ids, allowed=None, excluded=None):
    for tid in ids:
        subject = dataset.trials[tid].subject_id
        if excluded is not None and subject == excluded:
            raise InvariantViolation(f"Trial {tid} of held-out subject {excluded} reached training")
        if allowed is not None and subject != allowed:
            raise InvariantViolation(f"Trial {tid} does not belong to subject {allowed}")


def _as_arch_config(arch_config):
    return arch_config if isinstance(arch_config, ArchitectureConfig) else ArchitectureConfig.from_dict(arch_config)


def train_general(dataset, plan, arch_config, train_config, on_epoch_end=None):
    """(model, params, history) fitted on all training subjects"""
    if plan.subject is not None:
        raise DataValidationError("General training needs a general split plan")
    _check_subjects(dataset, plan.train + plan.val, excluded=plan.held_out_subject)
    model = build_model(_as_arch_config(arch_config), seed=train_config.seed)
    logger.info(f"Training general {model.arch_id.value} on {len(plan.train)} trials")
    return _fit_model(model, dataset, plan, train_config, on_epoch_end)


def finetune(general_params, arch_config, dataset, plan, train_config, header=None, on_epoch_end=None):
    """Continue training general weights on one subject with a scaled-down learning rate"""
    arch_config = _as_arch_config(arch_config)
    if plan.subject is None:
        raise DataValidationError("Fine-tuning needs a per-subject split plan")
    if header and header.get('architecture') and \
            ArchitectureConfig.from_dict(header['architecture']).to_dict() != arch_config.to_dict():
        raise DataValidationError("Architecture mismatch between general weights and config")
    if header and header.get('subjects') and plan.subject in header['subjects']:
        logger.warning(f"General weights were trained with subject {plan.subject}")
    _check_subjects(dataset, plan.train + plan.val, allowed=plan.subject)
    model = build_model(arch_config, seed=train_config.seed)
    try:
        model.set_params(general_params)
    except ShapeError as e:
        raise DataValidationError(f"Architecture mismatch: {str(e)}") from e
    scaled = train_config.replace(learning_rate=train_config.learning_rate * train_config.finetune_lr_scale)
    logger.info(f"Fine-tuning {model.arch_id.value} on subject {plan.subject} "
                f"(learning rate {scaled.learning_rate:g})")
    return _fit_model(model, dataset, plan, scaled, on_epoch_end)


def train_subject_specific(dataset, plan, arch_config, train_config, on_epoch_end=None):
    """(model, params, history) fitted from fresh weights on one subject"""
    if plan.subject is None:
        raise DataValidationError("Subject-specific training needs a per-subject split plan")
    _check_subjects(dataset, plan.train + plan.val, allowed=plan.subject)
    model = build_model(_as_arch_config(arch_config), seed=train_config.seed)
    logger.info(f"Training subject-specific {model.arch_id.value} on subject {plan.subject}")
    return _fit_model(model, dataset, plan, train_config, on_epoch_end)


def plan_subjects(plan, dataset):
    """Subjects whose trials the plan trains on"""
    return sorted({dataset.trials[tid].subject_id for tid in plan.train})
