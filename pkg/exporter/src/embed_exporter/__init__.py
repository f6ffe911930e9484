"""ResNet-18 penultimate-layer embedding exporter.

Runs inference only: images in, 512-dim embedding files out, in the binary
format the fusion toolkit consumes.
"""

__version__ = "0.1.0"

from .embedding_file import EMBEDDING_DIM, read_embedding, write_embedding
from .export import ExportError, ExportJob, ExportResult, export_embeddings
from .model import build_truncated_resnet18

__all__ = [
    "EMBEDDING_DIM",
    "ExportError",
    "ExportJob",
    "ExportResult",
    "build_truncated_resnet18",
    "export_embeddings",
    "read_embedding",
    "write_embedding",
]
