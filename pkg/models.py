from sqlalchemy import Column, Integer, String, DateTime, Float, ForeignKey
from sqlalchemy.orm import relationship
from datetime import datetime
from database import Base

class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    run_name = Column(String(100), nullable=False, index=True)
    preset = Column(String(30), nullable=False)
    mode = Column(String(20), nullable=False)
    config_hash = Column(String(64), nullable=False, index=True)
    seed = Column(Integer, default=0)
    epochs = Column(Integer, default=0)
    output_dir = Column(String(500), nullable=False)
    status = Column(String(20), default='completed')
    final_total = Column(Float)
    rmse = Column(Float)
    delta = Column(Float)
    mean_hs = Column(Float)
    wall_time_s = Column(Float)
    created_at = Column(DateTime, default=datetime.utcnow)

    # Relationships
    epoch_records = relationship("EpochRecord", back_populates="run", cascade="all, delete-orphan",
                                 order_by="EpochRecord.epoch")

class EpochRecord(Base):
    __tablename__ = "epoch_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    total = Column(Float, nullable=False)
    structural = Column(Float, default=0.0)
    bulk = Column(Float, default=0.0)
    volume = Column(Float, default=0.0)
    boundary = Column(Float, default=0.0)
    base_cell = Column(Float, default=0.0)
    regularization = Column(Float, default=0.0)
    rmse = Column(Float)
    alpha = Column(Float, default=0.0)

    # Relationships
    run = relationship("Run", back_populates="epoch_records")
