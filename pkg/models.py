from datetime import datetime
from sqlalchemy import Boolean, Column, DateTime, Float, Integer, String, Text
from app import Base


class RunRecord(Base):
    """One command-line run, the registry copy of its run manifest"""
    __tablename__ = 'run_record'

    id = Column(Integer, primary_key=True)
    command = Column(String(32), nullable=False)  # synth, preprocess, train, ...
    config_json = Column(Text, nullable=False)  # resolved config snapshot
    inputs_json = Column(Text)
    outputs_json = Column(Text)
    seed = Column(Integer)
    version = Column(String(32), nullable=False)
    duration_s = Column(Float)
    status = Column(String(20), default='ok')  # ok, failed
    created_at = Column(DateTime, default=datetime.utcnow)


class TuningTrial(Base):
    """One evaluated tuner candidate"""
    __tablename__ = 'tuning_trial'

    id = Column(Integer, primary_key=True)
    study = Column(String(100), nullable=False)
    candidate_id = Column(Integer, nullable=False)
    generation = Column(Integer, nullable=False)
    config_json = Column(Text, nullable=False)
    val_losses_json = Column(Text, nullable=False)  # per-epoch validation losses
    score = Column(Float)
    pruned = Column(Boolean, default=False)
    created_at = Column(DateTime, default=datetime.utcnow)
