"""Checkpoint score and embedding exporter for the retrieve-rerank-read engine.

Runs pretrained models (retriever, reranker, reader encoder, generative
reader, passage pruner) over a corpus and writes files in the engine's
interchange formats: the binary embedding index, binary per-pair encoder
outputs, and the JSONL score files a file-backed engine run reads. The
engine itself is never imported; the formats are implemented
independently against their byte-level contracts.
"""

from .checkpoints import EMBEDDING_DIM, KINDS, build_checkpoints, load_model
from .formats import (
    EMB_MAGIC,
    ENC_MAGIC,
    MAX_TOKENS,
    FormatError,
    question_file_key,
    write_embedding_file,
    write_encoder_file,
)
from .jobs import (
    DEFAULT_SPAN_LOGP,
    ExportJob,
    export_embeddings,
    export_encoder_outputs,
    export_scores,
)
from .tokenizing import MARKERS, VOCAB_SIZE, encoder_layout, tokenize

__version__ = "0.1.0"

__all__ = [
    "EMBEDDING_DIM",
    "KINDS",
    "build_checkpoints",
    "load_model",
    "EMB_MAGIC",
    "ENC_MAGIC",
    "MAX_TOKENS",
    "FormatError",
    "question_file_key",
    "write_embedding_file",
    "write_encoder_file",
    "DEFAULT_SPAN_LOGP",
    "ExportJob",
    "export_embeddings",
    "export_encoder_outputs",
    "export_scores",
    "MARKERS",
    "VOCAB_SIZE",
    "encoder_layout",
    "tokenize",
    "__version__",
]
