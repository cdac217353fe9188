"""naflow-exporter: torch checkpoints -> portable model format + golden traces."""
from .errors import UnsupportedLayer
from .export import (
    Checkpoint,
    export_golden_trace,
    export_model,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "UnsupportedLayer",
    "export_golden_trace",
    "export_model",
    "load_checkpoint",
    "save_checkpoint",
]
