"""
Evolutionary hyperparameter search with median pruning.

A search space maps each field to its list of choices. Candidates are dicts
field -> choice. Each generation is bred from the best candidates seen so far
by uniform crossover plus per-field mutation; no candidate is evaluated twice.
"""
import json
import itertools
import logging
from dataclasses import dataclass, field
import numpy as np
import pandas as pd
from app import get_session
from architectures import ArchitectureConfig, ArchitectureId
from models import TuningTrial
from regimes import train_general
from utils import ConfigError, DataValidationError

logger = logging.getLogger(__name__)

PRUNE_EPOCHS = (2, 4, 8)
# completed candidates needed before the median rule can prune
N_STARTUP = 2
# above this many configurations the space is not enumerated for fallback sampling
ENUMERATION_LIMIT = 100000

ARCH_FIELDS = ('input_dropout', 'hidden_dropout', 'lstm_units', 'rnnseq_units', 'dense_units',
               'cnn_filters', 'cnn_kernels', 'warmup_k')
TRAIN_FIELDS = ('batch_size', 'learning_rate')

DEFAULT_SEARCH_SPACES = {
    ArchitectureId.RNN: {
        'lstm_units': [[256, 128, 64], [128, 64], [64]],
        'input_dropout': [0.0, 0.1],
        'hidden_dropout': [0.0, 0.1, 0.2],
    },
    ArchitectureId.RNNSEQ: {
        'rnnseq_units': [32, 64, 128, 256],
        'batch_size': [32, 64, 128, 256],
        'hidden_dropout': [0.0, 0.1, 0.2],
    },
    ArchitectureId.FNN: {
        'dense_units': [[512, 256, 128], [256, 128], [128, 64], [64]],
        'batch_size': [32, 64, 128, 256],
        'hidden_dropout': [0.0, 0.1, 0.2],
    },
    ArchitectureId.FNNSEQ: {
        'dense_units': [[512, 256, 128], [256, 128], [128, 64], [64]],
        'batch_size': [32, 64, 128, 256],
        'hidden_dropout': [0.0, 0.1, 0.2],
    },
    ArchitectureId.CNN: {
        'cnn_filters': [[128, 128, 128, 128, 64], [64, 64, 64, 64, 32], [32, 32, 32, 32, 16]],
        'cnn_kernels': [[32, 8, 8, 4, 4], [16, 8, 4, 4, 2], [8, 4, 4, 2, 2]],
        'input_dropout': [0.0, 0.1],
        'batch_size': [1, 4, 8],
    },
}


def candidate_key(candidate):
    return json.dumps(candidate, sort_keys=True)


@dataclass
class TrialResult:
    candidate_id: int
    generation: int
    config: dict
    val_losses: list = field(default_factory=list)
    score: float = None
    pruned: bool = False

    def to_row(self):
        return {
            'candidate_id': self.candidate_id,
            'generation': self.generation,
            'config': candidate_key(self.config),
            'val_losses': json.dumps(self.val_losses),
            'epochs': len(self.val_losses),
            'score': self.score,
            'pruned': self.pruned,
        }


class PruningReporter:
    """Handed to the evaluate callback; report() returns True when the candidate must stop"""

    def __init__(self, tuner, result):
        self.tuner = tuner
        self.result = result

    def report(self, epoch, val_loss):
        self.result.val_losses.append(float(val_loss))
        if self.tuner.should_prune(epoch, float(val_loss)):
            self.result.pruned = True
            logger.info(f"Candidate {self.result.candidate_id} pruned at epoch {epoch} (val {val_loss:.6g})")
            return True
        return False

    __call__ = report


class EvolutionaryTuner:

    def __init__(self, search_space, evaluate, population=8, budget=20, seed=42, mutation_prob=0.3,
                 prune_epochs=PRUNE_EPOCHS, study='tune'):
        if not search_space or any(len(choices) == 0 for choices in search_space.values()):
            raise DataValidationError("empty search space")
        if population < 1 or budget < population:
            raise ConfigError(f"Budget {budget} must be at least the population size {population}")
        self.fields = sorted(search_space)
        self.space = {name: list(search_space[name]) for name in self.fields}
        self.evaluate = evaluate
        self.population = population
        self.budget = budget
        self.seed = seed
        self.mutation_prob = mutation_prob
        self.prune_epochs = set(prune_epochs)
        self.study = study
        self.rng = np.random.default_rng(seed)
        self.results = []
        self._evaluated = set()

    @property
    def space_size(self):
        return int(np.prod([len(self.space[name]) for name in self.fields]))

    def _choice(self, name):
        choices = self.space[name]
        return choices[int(self.rng.integers(len(choices)))]

    def sample(self):
        return {name: self._choice(name) for name in self.fields}

    def incumbent(self):
        done = [r for r in self.results if not r.pruned and r.score is not None]
        return min(done, key=lambda r: (r.score, r.candidate_id)) if done else None

    def should_prune(self, epoch, val_loss):
        """Median rule at the prune epochs; never prunes at or below the incumbent's curve"""
        if epoch not in self.prune_epochs:
            return False
        finished = [r for r in self.results if r.score is not None and len(r.val_losses) >= epoch]
        if len(finished) < N_STARTUP:
            return False
        best = self.incumbent()
        if best is not None and len(best.val_losses) >= epoch and val_loss <= best.val_losses[epoch - 1]:
            return False
        median = float(np.median([r.val_losses[epoch - 1] for r in finished]))
        return val_loss > median

    def _unevaluated(self, pending):
        if self.space_size > ENUMERATION_LIMIT:
            return None
        taken = self._evaluated | pending
        remaining = []
        for values in itertools.product(*(self.space[name] for name in self.fields)):
            candidate = dict(zip(self.fields, values))
            if candidate_key(candidate) not in taken:
                remaining.append(candidate)
        return remaining

    def _fresh(self, make, pending, attempts=50):
        """A candidate not evaluated or pending; None when the space is exhausted"""
        for _ in range(attempts):
            candidate = make()
            if candidate_key(candidate) not in self._evaluated | pending:
                return candidate
        remaining = self._unevaluated(pending)
        if not remaining:
            return None
        return remaining[int(self.rng.integers(len(remaining)))]

    def _parents(self):
        ranked = sorted((r for r in self.results if r.score is not None),
                        key=lambda r: (r.pruned, r.score, r.candidate_id))
        return ranked[:max(2, (self.population + 1) // 2)]

    def _child(self):
        parents = self._parents()
        if len(parents) == 1:
            a = b = parents[0].config
        else:
            i, j = self.rng.choice(len(parents), size=2, replace=False)
            a, b = parents[int(i)].config, parents[int(j)].config
        child = {}
        for name in self.fields:
            child[name] = a[name] if self.rng.random() < 0.5 else b[name]
            if self.rng.random() < self.mutation_prob and len(self.space[name]) > 1:
                others = [c for c in self.space[name] if c != child[name]]
                child[name] = others[int(self.rng.integers(len(others)))]
        return child

    def _run_candidate(self, candidate, generation):
        result = TrialResult(candidate_id=len(self.results), generation=generation, config=candidate)
        self._evaluated.add(candidate_key(candidate))
        logger.info(f"Candidate {result.candidate_id} (generation {generation}): {candidate}")
        score = self.evaluate(candidate, PruningReporter(self, result))
        if score is None:
            score = min(result.val_losses) if result.val_losses else np.inf
        result.score = float(score)
        self.results.append(result)
        return result

    def run(self):
        """(best candidate, [TrialResult]) after at most `budget` evaluations"""
        generation = 0
        while len(self.results) < self.budget:
            size = min(self.population, self.budget - len(self.results))
            pending = set()
            batch = []
            make = self.sample if generation == 0 else self._child
            for _ in range(size):
                candidate = self._fresh(make, pending)
                if candidate is None:
                    break
                pending.add(candidate_key(candidate))
                batch.append(candidate)
            if not batch:
                logger.info(f"Search space exhausted after {len(self.results)} candidates")
                break
            for candidate in batch:
                self._run_candidate(candidate, generation)
            best = self.incumbent()
            logger.info(f"Generation {generation} done; best score {best.score if best else None}")
            generation += 1
        best = self.incumbent()
        if best is None:
            raise DataValidationError("Every candidate was pruned")
        return dict(best.config), list(self.results)

    def trial_frame(self):
        return pd.DataFrame([r.to_row() for r in self.results])

    def export_csv(self, path):
        self.trial_frame().to_csv(path, index=False)
        return path

    def save_trials(self, registry_url):
        """Persist the trial log as TuningTrial rows"""
        session = get_session(registry_url)
        try:
            for r in self.results:
                session.add(TuningTrial(
                    study=self.study,
                    candidate_id=r.candidate_id,
                    generation=r.generation,
                    config_json=candidate_key(r.config),
                    val_losses_json=json.dumps(r.val_losses),
                    score=r.score,
                    pruned=r.pruned,
                ))
            session.commit()
        except Exception as e:
            logger.error(f"Failed to save tuning trials: {str(e)}")
            session.rollback()
            raise
        finally:
            session.close()


def apply_candidate(candidate, arch_config, train_config):
    """(ArchitectureConfig, TrainConfig) with the candidate's fields substituted"""
    unknown = set(candidate) - set(ARCH_FIELDS) - set(TRAIN_FIELDS)
    if unknown:
        raise ConfigError(f"Unknown search space fields: {sorted(unknown)}")
    arch_data = arch_config.to_dict()
    arch_data.update({k: v for k, v in candidate.items() if k in ARCH_FIELDS})
    train_changes = {k: v for k, v in candidate.items() if k in TRAIN_FIELDS}
    return ArchitectureConfig.from_dict(arch_data), train_config.replace(**train_changes)


def tune(dataset, plan, arch_config, train_config, search_space=None, population=8, budget=20, seed=42,
         mutation_prob=0.3, max_epochs=8, study='tune'):
    """Search the architecture's space with short general-regime fits scored on validation loss"""
    search_space = search_space or DEFAULT_SEARCH_SPACES[arch_config.arch_id]

    def evaluate(candidate, reporter):
        arch, config = apply_candidate(candidate, arch_config, train_config)
        config = config.replace(max_epochs=max_epochs)
        _, _, history = train_general(dataset, plan, arch, config, on_epoch_end=reporter.report)
        return min(h['val_loss'] for h in history)

    # a pruned candidate always stops short of max_epochs
    prune_epochs = tuple(e for e in PRUNE_EPOCHS if e < max_epochs)
    tuner = EvolutionaryTuner(search_space, evaluate, population=population, budget=budget, seed=seed,
                              mutation_prob=mutation_prob, prune_epochs=prune_epochs, study=study)
    best, results = tuner.run()
    return best, results, tuner
