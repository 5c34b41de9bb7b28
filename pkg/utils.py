import os
import json
import logging
import tempfile
import numpy as np
from app import __version__, get_session, registry_url_for
from models import RunRecord

logger = logging.getLogger(__name__)


class MyosynthError(Exception):
    """Base class for every error the toolkit raises on purpose"""


class DataValidationError(MyosynthError, ValueError):
    """Input data or parameters violate an operation's preconditions"""


class ShapeError(DataValidationError):
    """Array shapes do not line up"""


class ConfigError(DataValidationError):
    """A configuration file or flag failed validation"""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = errors or {}


class MissingArtifactError(MyosynthError, FileNotFoundError):
    """A weights file, dataset or report the command needs does not exist"""


class InvariantViolation(MyosynthError, AssertionError):
    """An internal consistency check failed"""


def require_file(path, what='file'):
    """Raise MissingArtifactError unless path exists"""
    if not path or not os.path.exists(path):
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def write_json_atomic(path, payload):
    """Write JSON via a temp file in the same directory and rename it into place"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    try:
        with os.fdopen(fd, 'w') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write('\n')
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    return path


def read_json(path, what='JSON file'):
    require_file(path, what)
    with open(path, 'r') as f:
        return json.load(f)


def derive_rng(*keys):
    """Independent generator for a tuple of integer keys (master seed first)"""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def log_run(out_dir, command, config_snapshot, inputs=None, outputs=None, seed=None,
            duration_s=None, status='ok'):
    """Record a command run in the registry"""
    session = None
    try:
        session = get_session(registry_url_for(out_dir))
        record = RunRecord(
            command=command,
            config_json=json.dumps(config_snapshot, sort_keys=True, default=str),
            inputs_json=json.dumps(inputs, sort_keys=True, default=str) if inputs else None,
            outputs_json=json.dumps(outputs, sort_keys=True, default=str) if outputs else None,
            seed=seed,
            version=__version__,
            duration_s=duration_s,
            status=status,
        )
        session.add(record)
        session.commit()
        return record.id
    except Exception as e:
        logger.error(f"Failed to log run: {str(e)}")
        if session is not None:
            session.rollback()
        return None
    finally:
        if session is not None:
            session.close()
