import os
import logging
from sqlalchemy import create_engine
from sqlalchemy.orm import DeclarativeBase, sessionmaker

__version__ = "0.1.0"

# Set up logging
logging.basicConfig(
    level=os.environ.get("MYOSYNTH_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s %(levelname)s %(name)s: %(message)s",
)

logger = logging.getLogger("myosynth")


class Base(DeclarativeBase):
    pass


# configure the toolkit
config = {}
config['THREADS'] = max(1, int(os.environ.get('MYOSYNTH_THREADS', '1')))
config['DEFAULT_SEED'] = int(os.environ.get('MYOSYNTH_DEFAULT_SEED', '42'))
config['REGISTRY_URL'] = os.environ.get('MYOSYNTH_REGISTRY_URL')
config['REGISTRY_FILENAME'] = 'registry.db'
config['ENGINE_OPTIONS'] = {
    "pool_pre_ping": True,
}

_engines = {}


def registry_url_for(out_dir):
    """Registry database URL: the configured one, else a SQLite file in out_dir"""
    if config['REGISTRY_URL']:
        return config['REGISTRY_URL']
    path = os.path.abspath(os.path.join(out_dir, config['REGISTRY_FILENAME']))
    return f"sqlite:///{path}"


def get_session(url):
    """Open a session on the registry at url, creating tables on first use"""
    engine = _engines.get(url)
    if engine is None:
        engine = create_engine(url, **config['ENGINE_OPTIONS'])
        # Import models to ensure tables are registered
        import models  # noqa: F401
        Base.metadata.create_all(engine)
        _engines[url] = engine
    return sessionmaker(bind=engine)()
