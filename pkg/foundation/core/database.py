"""
Run ledger
==========

SQLAlchemy models that record what the pipeline did:
- training runs (stage, schedule outcome, parameter hash)
- per-case evaluations (Dice per stage, extent errors)
- stage timings (elapsed time and failures of pipeline steps)

The ledger is off until configure_database() is called (CLI `--db`, or the
SEGMENTATION_DB_URL environment variable).
"""

from datetime import datetime
from typing import List, Optional
import logging
import os

from sqlalchemy import JSON, Boolean, Column, DateTime, Float, Integer, String, Text, create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()


class TrainingRun(Base):
    """One call to the training loop"""

    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True)
    stage = Column(String(20), nullable=False, index=True)  # "global", "local", "fold-3", ...
    started_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    epochs = Column(Integer)
    final_loss = Column(Float)
    final_lr = Column(Float)
    lr_changes = Column(JSON)  # [[epoch, lr], ...]
    mean_train_dice = Column(Float)
    wall_clock_s = Column(Float)

    parameter_hash = Column(String(64))
    config = Column(JSON)

    def __repr__(self):
        return f"<TrainingRun({self.stage}, {self.epochs} epochs)>"


class EvaluationRecord(Base):
    """Metrics of one segmented case"""

    __tablename__ = "evaluations"

    id = Column(Integer, primary_key=True)
    case_id = Column(String(200), nullable=False, index=True)
    evaluated_at = Column(DateTime, default=datetime.utcnow, nullable=False)

    dice = Column(Float)
    global_dice = Column(Float)
    local_dice = Column(Float)
    start_errors_mm = Column(JSON)
    end_errors_mm = Column(JSON)
    size_errors_mm = Column(JSON)

    def __repr__(self):
        return f"<EvaluationRecord({self.case_id}: dice={self.dice})>"


class StageTiming(Base):
    """Elapsed time of one tracked pipeline stage"""

    __tablename__ = "stage_timings"

    id = Column(Integer, primary_key=True)
    stage_id = Column(String(50), nullable=False, index=True)
    recorded_at = Column(DateTime, default=datetime.utcnow, nullable=False)
    elapsed_ms = Column(Float)
    success = Column(Boolean)
    error_message = Column(Text)
    content_hash = Column(String(64))

    def __repr__(self):
        return f"<StageTiming({self.stage_id}: {self.elapsed_ms:.1f} ms)>"


# Database connection management

_engine = None
_SessionLocal = None


def configure_database(url: Optional[str] = None) -> bool:
    """
    Point the ledger at a database URL (falls back to SEGMENTATION_DB_URL) and
    create tables. Returns False and leaves the ledger off when no URL is given.
    """
    global _engine, _SessionLocal

    url = url or os.getenv("SEGMENTATION_DB_URL")
    if not url:
        _engine = None
        _SessionLocal = None
        return False

    _engine = create_engine(url, echo=False)
    _SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=_engine)
    Base.metadata.create_all(bind=_engine)
    logger.info(f"Run ledger at {url}")
    return True


def ledger_enabled() -> bool:
    return _SessionLocal is not None


def get_session() -> Session:
    """Get a database session"""
    if _SessionLocal is None:
        raise RuntimeError("Run ledger is not configured")
    return _SessionLocal()


def _store(record) -> None:
    if not ledger_enabled():
        return
    session = get_session()
    try:
        session.add(record)
        session.commit()
    except Exception as e:
        session.rollback()
        logger.error(f"Error storing {type(record).__name__}: {e}")
    finally:
        session.close()


# Convenience functions

def store_training_run(
    stage: str,
    epochs: int,
    final_loss: float,
    final_lr: float,
    lr_changes: list,
    mean_train_dice: float,
    wall_clock_s: float,
    parameter_hash: str,
    config: dict = None,
) -> None:
    _store(TrainingRun(
        stage=stage,
        epochs=epochs,
        final_loss=final_loss,
        final_lr=final_lr,
        lr_changes=lr_changes,
        mean_train_dice=mean_train_dice,
        wall_clock_s=wall_clock_s,
        parameter_hash=parameter_hash,
        config=config,
    ))


def store_evaluation(
    case_id: str,
    dice: float,
    start_errors_mm: list,
    end_errors_mm: list,
    size_errors_mm: list,
    global_dice: float = None,
    local_dice: float = None,
) -> None:
    _store(EvaluationRecord(
        case_id=case_id,
        dice=dice,
        global_dice=global_dice,
        local_dice=local_dice,
        start_errors_mm=start_errors_mm,
        end_errors_mm=end_errors_mm,
        size_errors_mm=size_errors_mm,
    ))


def store_stage_timing(
    stage_id: str,
    elapsed_ms: float,
    success: bool = True,
    error_message: str = None,
    content_hash: str = None,
) -> None:
    _store(StageTiming(
        stage_id=stage_id,
        elapsed_ms=elapsed_ms,
        success=success,
        error_message=error_message,
        content_hash=content_hash,
    ))


def get_recent_runs(stage: Optional[str] = None, limit: int = 10) -> List[TrainingRun]:
    """Most recent training runs, optionally for one stage"""
    if not ledger_enabled():
        return []
    session = get_session()
    try:
        query = session.query(TrainingRun)
        if stage is not None:
            query = query.filter(TrainingRun.stage == stage)
        return query.order_by(TrainingRun.started_at.desc(), TrainingRun.id.desc()).limit(limit).all()
    finally:
        session.close()


def get_recent_evaluations(limit: int = 50) -> List[EvaluationRecord]:
    if not ledger_enabled():
        return []
    session = get_session()
    try:
        return session.query(EvaluationRecord)\
            .order_by(EvaluationRecord.id.desc())\
            .limit(limit)\
            .all()
    finally:
        session.close()


def get_stage_timings(stage_id: str, limit: int = 10) -> List[StageTiming]:
    if not ledger_enabled():
        return []
    session = get_session()
    try:
        return session.query(StageTiming)\
            .filter(StageTiming.stage_id == stage_id)\
            .order_by(StageTiming.id.desc())\
            .limit(limit)\
            .all()
    finally:
        session.close()
