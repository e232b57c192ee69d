import datetime
import json
import math
import os

import pandas as pd
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from utils.errors import ConfigError

# Create a base class for our ORM models
Base = declarative_base()


class ExperimentRun(Base):
    __tablename__ = 'experiment_runs'

    id = Column(Integer, primary_key=True)
    command = Column(String(50), nullable=False)  # 'eval', 'ablate', 'sweep', 'theory'
    config = Column(Text)  # JSON of the resolved ExperimentConfig
    summary = Column(Text)  # JSON of command-level aggregates
    created_at = Column(DateTime, default=lambda: datetime.datetime.now(datetime.timezone.utc))

    results = relationship('ResultRecord', back_populates='run', cascade='all, delete-orphan')

    def __repr__(self):
        return f"<ExperimentRun(id={self.id}, command='{self.command}')>"


class ResultRecord(Base):
    __tablename__ = 'result_records'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('experiment_runs.id'), nullable=False)
    seed = Column(String(20))
    arm = Column(String(100))
    split = Column(String(50))
    accuracy_frozen = Column(Float)
    accuracy_adapted = Column(Float)
    payload = Column(Text)  # JSON of the full table row

    run = relationship('ExperimentRun', back_populates='results')

    def __repr__(self):
        return f"<ResultRecord(run_id={self.run_id}, seed={self.seed}, arm='{self.arm}')>"


def resolve_url(url=None):
    """Explicit URL first, then the DATABASE_URL environment variable"""
    db_url = url or os.environ.get('DATABASE_URL')
    if not db_url:
        raise ConfigError("no results database configured (set run.results_db or DATABASE_URL)")
    # SQLAlchemy only accepts the postgresql:// scheme
    if db_url.startswith('postgres://'):
        db_url = db_url.replace('postgres://', 'postgresql://', 1)
    return db_url


def get_engine(url=None):
    """Get SQLAlchemy engine for the results ledger"""
    return create_engine(resolve_url(url))


def init_db(url=None):
    """Initialize the database by creating all tables"""
    engine = get_engine(url)
    Base.metadata.create_all(engine)
    return engine


def get_session(url=None):
    """Get a database session"""
    Session = sessionmaker(bind=init_db(url))
    return Session()


def _clean(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    if hasattr(value, 'item'):
        return _clean(value.item())
    return value


def record_results(table, command, config=None, summary=None, url=None):
    """
    Append a result table to the ledger

    Args:
        table: DataFrame with one row per seed/arm (or per theory trial)
        command: CLI subcommand that produced it
        config: resolved config as a dict
        summary: command-level aggregates as a dict
        url: database URL, defaults to DATABASE_URL

    Returns:
        int: id of the new ExperimentRun
    """
    session = get_session(url)

    try:
        run = ExperimentRun(
            command=command,
            config=json.dumps(config or {}, sort_keys=True),
            summary=json.dumps(summary or {}, sort_keys=True, default=str),
        )
        session.add(run)
        session.flush()  # Get the ID

        for record in table.to_dict(orient='records'):
            record = {k: _clean(v) for k, v in record.items()}
            session.add(ResultRecord(
                run_id=run.id,
                seed=str(record.get('seed')),
                arm=record.get('arm'),
                split=record.get('split'),
                accuracy_frozen=record.get('accuracy_frozen'),
                accuracy_adapted=record.get('accuracy_adapted'),
                payload=json.dumps(record, sort_keys=True, default=str),
            ))

        session.commit()
        return run.id

    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def load_results(run_id, url=None):
    """
    Load the rows of one recorded run

    Args:
        run_id: ExperimentRun id
        url: database URL, defaults to DATABASE_URL

    Returns:
        DataFrame: the recorded rows, empty if the run does not exist
    """
    session = get_session(url)

    try:
        records = session.query(ResultRecord).filter_by(run_id=run_id).order_by(ResultRecord.id).all()
        return pd.DataFrame([json.loads(r.payload) for r in records])
    finally:
        session.close()


def list_runs(url=None):
    """
    Get a list of recorded runs

    Returns:
        list: dicts with id, command and creation time
    """
    session = get_session(url)

    try:
        runs = session.query(ExperimentRun).order_by(ExperimentRun.id).all()
        return [{'id': r.id, 'command': r.command, 'created_at': r.created_at} for r in runs]
    finally:
        session.close()
