"""Phonetic-and-semantic embedding of spoken words.

A two-stage trainable pipeline: stage 1 embeds acoustic word segments into
phonetic vectors with speaker characteristics adversarially disentangled;
stage 2 learns semantic embeddings over those vectors with a skip-gram
objective. The embeddings are evaluated by cycle-constrained alignment
against reference text embeddings and by semantic spoken-document retrieval.
"""

from .corpus import (
    AcousticWordSegment,
    Corpus,
    SynthConfig,
    generate_synthetic_corpus,
    load_corpus,
    split_corpus,
    write_corpus,
)
from .storage import EmbeddingTable, load_table, save_table

__all__ = [
    "AcousticWordSegment",
    "Corpus",
    "SynthConfig",
    "EmbeddingTable",
    "generate_synthetic_corpus",
    "load_corpus",
    "write_corpus",
    "split_corpus",
    "load_table",
    "save_table",
]
