"""Batch export: images -> 512-dim embedding files plus a manifest patch."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .embedding_file import EMBEDDING_DIM, write_embedding
from .images import ImageLoadError, load_model_input
from .model import build_truncated_resnet18, embed_batch


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    images: dict[str, str]  # subject_id -> image path
    out_dir: str
    weights_path: str | None = None
    device: str = "cpu"
    slice_mode: str = "middle"  # volume handling: middle | average
    slab: int = 5  # slice count for `average`
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.images:
            raise ValueError("export job has no subjects")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class ExportResult:
    embedding_paths: dict[str, str]  # subject_id -> path relative to out_dir
    failures: dict[str, str] = field(default_factory=dict)  # subject_id -> reason

    @property
    def ok(self) -> bool:
        return not self.failures


def export_embeddings(job: ExportJob) -> ExportResult:
    """Write one embedding file per subject and a manifest patch CSV.

    Subjects are processed in sorted order; each subject's output depends
    only on its own image, so ordering never changes file contents. Failures
    are collected per subject instead of aborting the batch.
    """
    out = Path(job.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    device = torch.device(job.device)
    model = build_truncated_resnet18(job.weights_path, seed=job.seed).to(device)

    result = ExportResult(embedding_paths={})
    subjects = sorted(job.images)
    for start in range(0, len(subjects), job.batch_size):
        chunk = subjects[start : start + job.batch_size]
        inputs = []
        loaded = []
        for sid in chunk:
            try:
                inputs.append(load_model_input(job.images[sid], job.slice_mode, job.slab))
                loaded.append(sid)
            except ImageLoadError as exc:
                result.failures[sid] = str(exc)
        if not loaded:
            continue
        emb = embed_batch(model, torch.stack(inputs).to(device)).cpu().numpy()
        if emb.shape[1] != EMBEDDING_DIM:
            raise ExportError(
                f"model produced dim {emb.shape[1]}, expected {EMBEDDING_DIM}"
            )
        for sid, vec in zip(loaded, emb):
            rel = f"{sid}.mfe"
            write_embedding(out / rel, vec)
            result.embedding_paths[sid] = rel

    _write_patch(out / "embedding_paths.csv", result.embedding_paths)
    return result


def _write_patch(path: Path, embedding_paths: dict[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "embedding_path"])
        for sid in sorted(embedding_paths):
            writer.writerow([sid, embedding_paths[sid]])
