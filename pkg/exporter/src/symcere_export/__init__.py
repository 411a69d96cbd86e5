"""Review-text exporter producing row-aligned binary embedding files.

This package is deliberately decoupled from the trainer: the two sides share
only the tab-separated interaction format and the embedding file layout, so
either can be replaced without touching the other.
"""

from .encoders import EncoderError, HashedBagEncoder, resolve_encoder
from .export import ExportError, export_embeddings, read_export_manifest

__all__ = [
    "EncoderError",
    "ExportError",
    "HashedBagEncoder",
    "export_embeddings",
    "read_export_manifest",
    "resolve_encoder",
]
