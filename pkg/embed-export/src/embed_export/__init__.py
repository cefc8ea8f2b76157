"""Batch embedding exporter for dataset directories.

Reads a dataset directory (manifest plus image files), runs a selectable
embedding model over every image, and writes the vectors to an EMB1 file
that downstream tooling parses: little-endian ``EMB1`` magic, u32 count,
u32 dimension, count x dimension float32 values, newline-separated ids.
"""

from .emb1 import read_emb1_header, write_emb1
from .exporter import ExportError, ExportJob, export_embeddings
from .models import ModelUnavailableError, available_models, get_model

__all__ = [
    "ExportError",
    "ExportJob",
    "ModelUnavailableError",
    "available_models",
    "export_embeddings",
    "get_model",
    "read_emb1_header",
    "write_emb1",
]
