# services/exceptions.py
from typing import Optional


class ToponetError(Exception):
    """Base class for every error raised by the design services"""


class ConfigError(ToponetError, ValueError):
    """Invalid run configuration or preset request (CLI exit code 2)"""

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class NumericalError(ToponetError, RuntimeError):
    """A numerical stage failed (CLI exit code 3)"""


class SingularSystemError(NumericalError):
    """Linear system could not be solved to the residual contract"""

    def __init__(self, message: str, cell: Optional[int] = None):
        self.cell = cell
        if cell is not None:
            message = f"cell {cell}: {message}"
        super().__init__(message)


class DisconnectedStructureError(SingularSystemError):
    """Full-scale design has no solid path between supports and loads"""


class TrainingError(NumericalError):
    """FE failure during training, tagged with the epoch and the failing cell"""

    def __init__(self, message: str, epoch: int, cell: Optional[int] = None):
        self.epoch = epoch
        self.cell = cell
        where = f"epoch {epoch}" + (f", cell {cell}" if cell is not None else "")
        super().__init__(f"{where}: {message}")


class RenderBudgetError(ToponetError):
    """Requested raster exceeds the configured pixel budget"""
