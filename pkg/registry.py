"""SQLAlchemy models for the run registry."""

import os
from datetime import datetime

from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

Base = declarative_base()

DEFAULT_DATABASE_URL = "sqlite:///imcat-runs.db"

RUNNING = "running"
FINISHED = "finished"
FAILED = "failed"


class Run(Base):
    """One training run and where it lives on disk."""

    __tablename__ = 'runs'

    id = Column(
        Integer,
        primary_key=True,
    )

    run_dir = Column(
        Text,
        nullable=False,
    )

    backbone = Column(
        Text,
        nullable=False,
    )

    K = Column(Integer, nullable=False)
    delta = Column(Float, nullable=False)
    alpha = Column(Float, nullable=False)
    beta = Column(Float, nullable=False)
    gamma = Column(Float, nullable=False)
    seed = Column(Integer, nullable=False)

    status = Column(
        Text,
        nullable=False,
        default=RUNNING,
    )

    best_epoch = Column(Integer)

    best_valid_recall = Column(Float)

    started_at = Column(
        DateTime,
        nullable=False,
        default=datetime.utcnow,
    )

    metrics = relationship('RunMetric', cascade="all, delete", backref="run")

    def __repr__(self):
        return f"<Run #{self.id}: {self.backbone} K={self.K} {self.status} {self.run_dir}>"

    @classmethod
    def start(cls, session, run_dir, config):
        """Add a `running` row for `config` (a resolved run config mapping)."""

        run = cls(
            run_dir=run_dir,
            backbone=config["backbone"],
            K=config["K"],
            delta=config["delta"],
            alpha=config["alpha"],
            beta=config["beta"],
            gamma=config["gamma"],
            seed=config["seed"],
        )
        session.add(run)
        return run

    def finish(self, best_epoch, best_valid_recall):
        self.status = FINISHED
        self.best_epoch = best_epoch
        self.best_valid_recall = best_valid_recall

    def fail(self):
        self.status = FAILED

    def to_dict(self):
        return {
            "id": self.id,
            "run_dir": self.run_dir,
            "backbone": self.backbone,
            "K": self.K,
            "delta": self.delta,
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "seed": self.seed,
            "status": self.status,
            "best_epoch": self.best_epoch,
            "best_valid_recall": self.best_valid_recall,
        }


class RunMetric(Base):
    """A single evaluated number, e.g. test recall@20."""

    __tablename__ = 'run_metrics'

    id = Column(
        Integer,
        primary_key=True,
    )

    run_id = Column(
        Integer,
        ForeignKey('runs.id', ondelete='CASCADE'),
        nullable=False,
    )

    split = Column(
        Text,
        nullable=False,
    )

    name = Column(
        Text,
        nullable=False,
    )

    value = Column(
        Float,
        nullable=False,
    )

    def __repr__(self):
        return f"<RunMetric run={self.run_id} {self.split} {self.name}={self.value:.4f}>"


def connect_db(url=None):
    """Engine-bound session factory; tables are created on first use.

    The URL comes from IMCAT_DATABASE_URL unless given.
    """

    url = url or os.environ.get('IMCAT_DATABASE_URL', DEFAULT_DATABASE_URL)
    engine = create_engine(url, future=True)
    Base.metadata.create_all(engine)
    return sessionmaker(bind=engine, future=True, expire_on_commit=False)


def find_run(session, run_dir):
    """Most recent registry row for `run_dir`, or None."""

    return (session.query(Run)
            .filter_by(run_dir=run_dir)
            .order_by(Run.id.desc())
            .first())


def record_metrics(session, run, split, metrics):
    """One RunMetric per numeric entry of `metrics`."""

    for name, value in metrics.items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            session.add(RunMetric(run=run, split=split, name=name, value=float(value)))
