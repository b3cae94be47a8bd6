# services/registry_service.py
import logging
from typing import List, Optional, Sequence

from sqlalchemy.orm import Session

from models import EpochRecord, Run
from schemas import LossReport, RunSummary

logger = logging.getLogger(__name__)


class RegistryService:
    """Index of finished runs; the run directories remain the source of truth"""

    def __init__(self, db: Session):
        self.db = db

    def record_run(self, summary: RunSummary, log: Sequence[LossReport], output_dir: str,
                   status: str = "completed") -> Run:
        run = Run(
            run_name=summary.run_name,
            preset=summary.preset,
            mode=summary.mode,
            config_hash=summary.config_hash,
            seed=summary.seed,
            epochs=summary.epochs,
            output_dir=output_dir,
            status=status,
            final_total=summary.final_losses.total if summary.final_losses else None,
            rmse=summary.rmse,
            delta=summary.delta,
            mean_hs=summary.mean_percent_hs,
            wall_time_s=summary.wall_time_s,
        )
        run.epoch_records = [
            EpochRecord(
                epoch=r.epoch, total=r.total, structural=r.structural, bulk=r.bulk, volume=r.volume,
                boundary=r.boundary, base_cell=r.base_cell, regularization=r.regularization,
                rmse=r.rmse, alpha=r.alpha,
            )
            for r in log
        ]
        self.db.add(run)
        self.db.commit()
        self.db.refresh(run)
        logger.info(f"Recorded run {run.run_name} as id {run.id} ({len(log)} epochs)")
        return run

    def list_runs(self, preset: Optional[str] = None, limit: int = 100) -> List[Run]:
        query = self.db.query(Run)
        if preset:
            query = query.filter(Run.preset == preset)
        return query.order_by(Run.created_at.desc(), Run.id.desc()).limit(limit).all()

    def get_run(self, run_id: int) -> Optional[Run]:
        return self.db.query(Run).filter(Run.id == run_id).first()

    def find_by_output_dir(self, output_dir: str) -> Optional[Run]:
        return self.db.query(Run).filter(Run.output_dir == output_dir).first()
