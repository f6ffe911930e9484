"""Synthetic desk-scale datasets: deformed icosphere structures plus image
embeddings carrying a complementary signal.

Each subject has a latent z (age, or a binary diagnosis). A configurable
shape signal scales structure-specific bump deformations with z (strongest on
the hippocampus analogs); the image embedding mixes z with a modality-private
factor, so fusing both modalities can beat either alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, SubjectRecord, save_manifest, write_embedding
from .mesh import TriangleMesh, save_off
from .structures import STRUCTURES

# relative strength of the z-driven deformation per structure
_SENSITIVITY = {s: 0.3 for s in STRUCTURES}
_SENSITIVITY.update(
    {"hippocampus_l": 1.0, "hippocampus_r": 1.0, "amygdala_l": 0.8, "amygdala_r": 0.8}
)


@dataclass
class SynthConfig:
    num_subjects: int = 120
    seed: int = 0
    task: str = "regression"  # or "classification"
    resolution: int = 2  # icosphere subdivision level
    w_shape: float = 0.35  # z -> bump amplitude coupling
    w_image: float = 1.0  # z -> image embedding coupling
    shape_noise: float = 0.03  # amplitude noise, per subject/structure
    image_noise: float = 0.1  # iid gaussian noise on the embedding
    embedding_dim: int = 64
    age_range: tuple = (18.0, 88.0)

    def __post_init__(self):
        if self.num_subjects < 10:
            raise ValueError("need at least 10 subjects")
        if self.w_shape < 0 or self.w_image < 0:
            raise ValueError("signal weights must be >= 0")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")


def icosphere(level: int) -> TriangleMesh:
    """Unit icosphere by repeated 1-to-4 subdivision of an icosahedron."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}
        verts_list = list(verts)

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                m = verts_list[a] + verts_list[b]
                verts_list.append(m / np.linalg.norm(m))
                midpoint[key] = len(verts_list) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    return TriangleMesh(verts, faces)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random proper rotation via quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _bump_field(dirs: np.ndarray, centers: np.ndarray, width: float = 0.5) -> np.ndarray:
    """Sum of angular gaussian bumps over unit directions, zero-mean shifted."""
    cosang = np.clip(dirs @ centers.T, -1.0, 1.0)
    ang = np.arccos(cosang)
    g = np.exp(-(ang ** 2) / (2 * width ** 2)).sum(axis=1)
    return g - g.mean()


def _subject_latents(cfg: SynthConfig, rng: np.random.Generator):
    """(ages, diagnoses, z01 in [0, 1]) for all subjects."""
    n = cfg.num_subjects
    if cfg.task == "regression":
        lo, hi = cfg.age_range
        ages = rng.uniform(lo, hi, size=n)
        return ages, None, (ages - lo) / (hi - lo)
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2 :] = 1
    labels = labels[rng.permutation(n)]
    return None, labels, labels.astype(np.float64)


def _splits(
    n: int, rng: np.random.Generator, labels: np.ndarray | None = None
) -> list[str]:
    """70/10/20 split assignment, stratified by class when labels are given.

    Stratification keeps every split populated with both classes so that
    ROC-based evaluation is well defined even for small datasets.
    """
    groups = (
        [np.arange(n)]
        if labels is None
        else [np.flatnonzero(labels == c) for c in np.unique(labels)]
    )
    out = ["test"] * n
    for group in groups:
        order = group[rng.permutation(len(group))]
        n_train = int(round(0.7 * len(group)))
        n_val = max(int(round(0.1 * len(group))), 1)
        for i in order[:n_train]:
            out[i] = "train"
        for i in order[n_train : n_train + n_val]:
            out[i] = "val"
    return out


def generate_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    """Write a full dataset (meshes, embeddings, manifest) under out_dir."""
    out = Path(out_dir)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "embeddings").mkdir(exist_ok=True)

    base = icosphere(cfg.resolution)
    dirs = base.vertices  # unit directions

    ds_rng = np.random.default_rng([cfg.seed, 999])
    bump_centers = {
        s: np.array(
            [c / np.linalg.norm(c) for c in ds_rng.normal(size=(3, 3))]
        )
        for s in STRUCTURES
    }
    fields = {s: _bump_field(dirs, bump_centers[s]) for s in STRUCTURES}
    radii = {s: 5.0 + 0.4 * i for i, s in enumerate(STRUCTURES)}

    # orthonormal directions for the shared and private image factors
    p = ds_rng.normal(size=(2, cfg.embedding_dim))
    p[0] /= np.linalg.norm(p[0])
    p[1] -= p[1] @ p[0] * p[0]
    p[1] /= np.linalg.norm(p[1])

    ages, labels, z01 = _subject_latents(cfg, ds_rng)
    splits = _splits(cfg.num_subjects, ds_rng, labels)

    records = []
    for i in range(cfg.num_subjects):
        sid = f"subj_{i:04d}"
        rng = np.random.default_rng([cfg.seed, i])
        subj_dir = out / "meshes" / sid
        subj_dir.mkdir(exist_ok=True)
        mesh_paths = {}
        for s in STRUCTURES:
            amp = (
                cfg.w_shape * _SENSITIVITY[s] * z01[i]
                + cfg.shape_noise * rng.normal()
            )
            radius = radii[s] * (1.0 + amp * fields[s])
            verts = dirs * radius[:, None]
            rot = _random_rotation(rng)
            trans = rng.uniform(-20.0, 20.0, size=3)
            verts = verts @ rot.T + trans
            mesh = TriangleMesh(verts, base.faces, s)
            rel = f"meshes/{sid}/{s}.off"
            save_off(mesh, out / rel)
            mesh_paths[s] = rel

        m = rng.normal()
        emb = (
            cfg.w_image * z01[i] * p[0]
            + m * p[1]
            + cfg.image_noise * rng.normal(size=cfg.embedding_dim)
        )
        emb_rel = f"embeddings/{sid}.mfe"
        write_embedding(out / emb_rel, emb.astype(np.float32))

        records.append(
            SubjectRecord(
                subject_id=sid,
                age=None if ages is None else float(ages[i]),
                diagnosis=None if labels is None else int(labels[i]),
                split=splits[i],
                embedding_path=emb_rel,
                mesh_paths=mesh_paths,
            )
        )

    manifest = Manifest(out, records)
    save_manifest(manifest, out / "manifest.csv")
    return manifest
