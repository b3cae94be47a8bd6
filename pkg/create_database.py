import json
import os
from pathlib import Path
from dotenv import load_dotenv
from database import engine, Base, SessionLocal
import models  # noqa: F401  (registers tables)
from schemas import LossReport, RunSummary
from services.registry_service import RegistryService
from services.training_service import read_epoch_log

load_dotenv()

def create_tables():
    """Create all database tables"""
    print("Creating database tables...")
    Base.metadata.create_all(bind=engine)
    print("Tables created successfully!")

def index_existing_runs(output_root: str = None) -> int:
    """Register run directories that have a summary.json but no registry entry"""
    root = Path(output_root or os.getenv("TOPONET_OUTPUT_ROOT", "./runs"))
    if not root.exists():
        print(f"No run directory at {root}, nothing to index")
        return 0

    db = SessionLocal()
    registry = RegistryService(db)
    added = 0
    try:
        for summary_path in sorted(root.glob("*/summary.json")):
            run_dir = summary_path.parent
            if registry.find_by_output_dir(str(run_dir)):
                continue
            summary = RunSummary.model_validate(json.loads(summary_path.read_text()))
            log = []
            log_path = run_dir / "epochs.csv"
            if log_path.exists():
                log = [LossReport(**row) for row in read_epoch_log(log_path)]
            registry.record_run(summary, log, str(run_dir))
            print(f"📦 Indexed {run_dir.name}")
            added += 1
    finally:
        db.close()
    return added

if __name__ == "__main__":
    create_tables()
    count = index_existing_runs()
    print(f"Database setup complete! {count} run(s) indexed.")
