"""Dataset manifests and the binary image-embedding file format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .structures import STRUCTURES

SPLITS = ("train", "val", "test")

MANIFEST_FIELDS = ["subject_id", "age", "diagnosis", "split", "embedding_path"] + [
    f"mesh_{s}" for s in STRUCTURES
]


class ManifestError(ValueError):
    pass


class EmbeddingFileError(ValueError):
    pass


@dataclass
class SubjectRecord:
    subject_id: str
    age: float | None
    diagnosis: int | None
    split: str
    embedding_path: str | None
    mesh_paths: dict[str, str]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(
                f"subject {self.subject_id!r}: bad split {self.split!r}"
            )
        missing = [s for s in STRUCTURES if not self.mesh_paths.get(s)]
        if missing:
            raise ManifestError(
                f"subject {self.subject_id!r} missing mesh paths for: {missing}"
            )


@dataclass
class Manifest:
    root: Path
    subjects: list[SubjectRecord]

    def __post_init__(self):
        ids = [s.subject_id for s in self.subjects]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ManifestError(f"duplicate subject ids: {sorted(dupes)}")

    def split(self, name: str) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.split == name]

    def split_sizes(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def mesh_path(self, record: SubjectRecord, structure: str) -> Path:
        return self.root / record.mesh_paths[structure]

    def embedding_path(self, record: SubjectRecord) -> Path | None:
        if not record.embedding_path:
            return None
        return self.root / record.embedding_path

    def require_labels(self, task: str) -> None:
        if task == "regression":
            missing = [s.subject_id for s in self.subjects if s.age is None]
            if missing:
                raise ManifestError(f"subjects missing age labels: {missing[:5]}")
        else:
            missing = [s.subject_id for s in self.subjects if s.diagnosis is None]
            if missing:
                raise ManifestError(f"subjects missing diagnosis labels: {missing[:5]}")


def _mesh_vertex_count(path: Path) -> int:
    """Vertex count from an OFF/PLY header without parsing the body."""
    with open(path, "r") as fh:
        first = fh.readline().strip()
        if first.lower() == "ply":
            for line in fh:
                tok = line.split()
                if tok[:2] == ["element", "vertex"]:
                    return int(tok[2])
            raise ManifestError(f"{path}: no vertex element in PLY header")
        if first != "OFF":
            raise ManifestError(f"{path}: expected OFF or PLY header")
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                return int(line.split()[0])
    raise ManifestError(f"{path}: truncated header")


def load_manifest(path, check_meshes: bool = True) -> Manifest:
    path = Path(path)
    root = path.parent
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ManifestError(
                f"{path}: header mismatch; expected {MANIFEST_FIELDS},"
                f" got {reader.fieldnames}"
            )
        subjects = []
        for row in reader:
            age = float(row["age"]) if row["age"] else None
            diagnosis = int(row["diagnosis"]) if row["diagnosis"] else None
            subjects.append(
                SubjectRecord(
                    subject_id=row["subject_id"],
                    age=age,
                    diagnosis=diagnosis,
                    split=row["split"],
                    embedding_path=row["embedding_path"] or None,
                    mesh_paths={s: row[f"mesh_{s}"] for s in STRUCTURES},
                )
            )
    manifest = Manifest(root, subjects)
    if check_meshes:
        counts: dict[str, int] = {}
        for rec in subjects:
            for s in STRUCTURES:
                p = manifest.mesh_path(rec, s)
                if not p.exists():
                    raise ManifestError(
                        f"subject {rec.subject_id!r}: missing mesh file {p}"
                        f" (structure {s})"
                    )
                n = _mesh_vertex_count(p)
                if s not in counts:
                    counts[s] = n
                elif counts[s] != n:
                    raise ManifestError(
                        f"subject {rec.subject_id!r}: structure {s} has {n}"
                        f" vertices, expected {counts[s]}"
                    )
    return manifest


def save_manifest(manifest: Manifest, path) -> None:
    with open(str(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for rec in manifest.subjects:
            row = {
                "subject_id": rec.subject_id,
                "age": "" if rec.age is None else repr(rec.age),
                "diagnosis": "" if rec.diagnosis is None else rec.diagnosis,
                "split": rec.split,
                "embedding_path": rec.embedding_path or "",
            }
            for s in STRUCTURES:
                row[f"mesh_{s}"] = rec.mesh_paths[s]
            writer.writerow(row)


EMBEDDING_MAGIC = b"MFE1"


def write_embedding(path, vector: np.ndarray) -> None:
    v = np.ascontiguousarray(vector, dtype="<f4").reshape(-1)
    if not np.isfinite(v).all():
        raise EmbeddingFileError("embedding contains non-finite values")
    with open(str(path), "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", v.size))
        fh.write(v.tobytes())


def read_embedding(path) -> np.ndarray:
    with open(str(path), "rb") as fh:
        raw = fh.read()
    if raw[:4] != EMBEDDING_MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {raw[:4]!r}")
    (dim,) = struct.unpack("<I", raw[4:8])
    payload = raw[8:]
    if len(payload) != 4 * dim:
        raise EmbeddingFileError(
            f"{path}: truncated payload ({len(payload) // 4} of {dim} floats)"
        )
    v = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(v).all():
        raise EmbeddingFileError(f"{path}: non-finite embedding value")
    return np.array(v, dtype=np.float32)
