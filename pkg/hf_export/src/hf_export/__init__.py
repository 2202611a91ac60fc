"""Bridge from pretrained-model checkpoints to TPVF vector files."""

__version__ = "0.1.0"

from .export import ExportSpec, ExportResult, export  # noqa: F401
