"""Shared on-disk formats: tensor archives and embedding tables.

Tensor archive: an .npz holding named float32 arrays plus a JSON metadata
entry (config echo, seed, provenance). Used for model checkpoints and for
the per-segment phonetic-vector cache.

Embedding table file: a JSON header line (dim, count, provenance) followed by
binary records, each a length-prefixed UTF-8 label and dim little-endian
float32 values.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class StorageError(Exception):
    pass


def save_archive(path, arrays, meta=None):
    """Write named arrays + metadata to an .npz archive."""
    payload = {name: np.asarray(a, dtype=np.float32) for name, a in arrays.items()}
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8
    )
    buf = io.BytesIO()
    np.savez(buf, **payload)
    Path(path).write_bytes(buf.getvalue())


def load_archive(path):
    """Read an archive; returns (arrays dict, meta dict)."""
    path = Path(path)
    if not path.exists():
        raise StorageError(f"archive not found: {path}")
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode()) if "__meta__" in npz else {}
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    return arrays, meta


@dataclass
class EmbeddingTable:
    """Map from word-type label to one fixed-dimension vector."""

    entries: dict[str, np.ndarray]
    dim: int
    provenance: str = ""

    def __post_init__(self):
        for label, vec in self.entries.items():
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (self.dim,):
                raise StorageError(
                    f"table entry {label!r} has shape {vec.shape}, expected ({self.dim},)"
                )
            self.entries[label] = vec

    def __len__(self):
        return len(self.entries)

    def __contains__(self, label):
        return label in self.entries

    def __getitem__(self, label):
        return self.entries[label]

    @property
    def labels(self):
        return sorted(self.entries)

    def matrix(self, labels=None):
        """Stack entries for the given labels (default: all, sorted) into a matrix."""
        labels = self.labels if labels is None else list(labels)
        return np.stack([self.entries[l] for l in labels]), labels

    def subset(self, labels):
        missing = [l for l in labels if l not in self.entries]
        if missing:
            raise StorageError(f"labels missing from table: {missing[:10]}")
        return EmbeddingTable(
            entries={l: self.entries[l] for l in labels}, dim=self.dim, provenance=self.provenance
        )


def save_table(table, path):
    header = json.dumps(
        {"dim": table.dim, "count": len(table), "provenance": table.provenance}, sort_keys=True
    )
    with open(path, "wb") as f:
        f.write(header.encode() + b"\n")
        for label in table.labels:
            raw = label.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(np.ascontiguousarray(table.entries[label], dtype="<f4").tobytes())


def load_table(path):
    path = Path(path)
    if not path.exists():
        raise StorageError(f"embedding table not found: {path}")
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        dim, count = header["dim"], header["count"]
        entries = {}
        for _ in range(count):
            (label_len,) = struct.unpack("<H", f.read(2))
            label = f.read(label_len).decode()
            vec = np.frombuffer(f.read(4 * dim), dtype="<f4").copy()
            if vec.shape != (dim,):
                raise StorageError(f"truncated record for label {label!r}")
            entries[label] = vec
    return EmbeddingTable(entries=entries, dim=dim, provenance=header.get("provenance", ""))
