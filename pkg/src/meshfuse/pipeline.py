"""Dataset preprocessing: alignment, pseudo-coordinate scales, FPFH caches,
and assembly of batched (disjoint-union) graphs for training.

All subjects of one structure share a topology, so a subject batch is one
big graph with vertex blocks per subject; FPFH and the GNN layers both
operate on the union directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import align_dataset
from .data import Manifest, read_embedding
from .fpfh import fpfh, write_features
from .layers import compute_pseudo, pseudo_normalizer
from .mesh import GraphTopology, TriangleMesh, load_mesh, mesh_to_graph, save_off
from .structures import STRUCTURES


@dataclass
class StructureData:
    """Aligned geometry of one structure across all subjects."""

    topology: GraphTopology
    faces: np.ndarray  # (m, 3) shared across subjects
    vertices: np.ndarray  # (num_subjects, n, 3) aligned, mm
    normalizer: float  # pseudo-coordinate scale r from the reference mesh


@dataclass
class DatasetBundle:
    subject_ids: list[str]
    splits: list[str]
    ages: np.ndarray  # nan when absent
    diagnoses: np.ndarray  # -1 when absent
    embeddings: np.ndarray | None  # (num_subjects, e)
    structures: dict[str, StructureData]
    reference_subject: str
    # cache of stacked topologies keyed (structure, subject index bytes)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_subjects(self) -> int:
        return len(self.subject_ids)

    def split_indices(self, name: str) -> np.ndarray:
        return np.array([i for i, s in enumerate(self.splits) if s == name], dtype=np.int64)

    def targets(self, task: str) -> np.ndarray:
        return self.ages if task == "regression" else self.diagnoses


def preprocess(
    manifest: Manifest,
    reference_subject: str | None = None,
    out_dir=None,
) -> DatasetBundle:
    """Align all meshes to a reference subject and load labels/embeddings.

    When out_dir is given, persists aligned meshes, per-mesh FPFH caches, the
    transform log, and the pseudo-coordinate normalizers.
    """
    meshes: dict[str, dict[str, TriangleMesh]] = {}
    for rec in manifest.subjects:
        meshes[rec.subject_id] = {
            s: load_mesh(manifest.mesh_path(rec, s), s) for s in STRUCTURES
        }
    aligned, log = align_dataset(meshes, reference_subject)
    subjects = sorted(aligned)
    ref = reference_subject if reference_subject is not None else subjects[0]

    structures: dict[str, StructureData] = {}
    for s in STRUCTURES:
        ref_mesh = aligned[ref][s]
        topo = mesh_to_graph(ref_mesh)
        verts = np.stack([aligned[subj][s].vertices for subj in subjects])
        structures[s] = StructureData(
            topology=topo,
            faces=ref_mesh.faces,
            vertices=verts,
            normalizer=pseudo_normalizer(ref_mesh, topo),
        )

    by_id = {rec.subject_id: rec for rec in manifest.subjects}
    ages = np.array(
        [np.nan if by_id[s].age is None else by_id[s].age for s in subjects]
    )
    diagnoses = np.array(
        [-1 if by_id[s].diagnosis is None else by_id[s].diagnosis for s in subjects],
        dtype=np.int64,
    )
    splits = [by_id[s].split for s in subjects]

    embeddings = None
    if all(by_id[s].embedding_path for s in subjects):
        vecs = [read_embedding(manifest.embedding_path(by_id[s])) for s in subjects]
        dims = {v.size for v in vecs}
        if len(dims) != 1:
            raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
        embeddings = np.stack(vecs)

    bundle = DatasetBundle(
        subject_ids=subjects,
        splits=splits,
        ages=ages,
        diagnoses=diagnoses,
        embeddings=embeddings,
        structures=structures,
        reference_subject=ref,
    )
    if out_dir is not None:
        _persist(bundle, log, Path(out_dir))
    return bundle


def _persist(bundle: DatasetBundle, log, out: Path) -> None:
    (out / "aligned").mkdir(parents=True, exist_ok=True)
    (out / "features").mkdir(exist_ok=True)
    transforms = {}
    for (subj, struct), t in log.items():
        transforms[f"{subj}/{struct}"] = t.flat()
    with open(out / "transforms.json", "w") as fh:
        json.dump(transforms, fh, indent=1, sort_keys=True)
    with open(out / "pseudo_norm.json", "w") as fh:
        json.dump(
            {s: bundle.structures[s].normalizer for s in STRUCTURES},
            fh,
            indent=1,
            sort_keys=True,
        )
    counts = {s: int(bundle.structures[s].topology.num_nodes) for s in STRUCTURES}
    with open(out / "vertex_counts.json", "w") as fh:
        json.dump(counts, fh, indent=1, sort_keys=True)
    for i, subj in enumerate(bundle.subject_ids):
        (out / "aligned" / subj).mkdir(exist_ok=True)
        (out / "features" / subj).mkdir(exist_ok=True)
        for s in STRUCTURES:
            sd = bundle.structures[s]
            mesh = TriangleMesh(sd.vertices[i], sd.faces, s)
            save_off(mesh, out / "aligned" / subj / f"{s}.off")
            feats = fpfh(mesh, sd.topology)
            write_features(out / "features" / subj / f"{s}.mff", feats)


def stacked_graph(sd: StructureData, subject_idx: np.ndarray):
    """Disjoint-union mesh/topology over a subject subset.

    Returns (vertices (k*n, 3), faces, topology, segment ids, counts).
    """
    subject_idx = np.asarray(subject_idx, dtype=np.int64)
    k = subject_idx.size
    n = sd.topology.num_nodes
    verts = sd.vertices[subject_idx].reshape(k * n, 3)
    offs = (np.arange(k) * n)[:, None, None]
    faces = (sd.faces[None, :, :] + offs).reshape(-1, 3)
    edges = (sd.topology.edges[None, :, :] + offs).reshape(-1, 2)
    topo = GraphTopology(k * n, edges)
    segment = np.repeat(np.arange(k), n)
    counts = np.full(k, n, dtype=np.int64)
    return verts, faces, topo, segment, counts


def batch_inputs(
    bundle: DatasetBundle,
    subject_idx: np.ndarray,
    layer_type: str,
    perturb: dict[str, np.ndarray] | None = None,
) -> dict:
    """Per-structure batched GNN inputs (features recomputed from geometry).

    `perturb` optionally maps structure id -> additive vertex displacements
    of shape (k, n, 3) (training augmentation).
    """
    batch = {}
    subject_idx = np.asarray(subject_idx, dtype=np.int64)
    k = subject_idx.size
    key_suffix = subject_idx.tobytes()
    for s in STRUCTURES:
        sd = bundle.structures[s]
        key = (s, key_suffix)
        if key in bundle.cache:
            faces, topo, segment, counts = bundle.cache[key]
            n = sd.topology.num_nodes
            verts = sd.vertices[subject_idx].reshape(k * n, 3)
        else:
            verts, faces, topo, segment, counts = stacked_graph(sd, subject_idx)
            bundle.cache[key] = (faces, topo, segment, counts)
        if perturb is not None and s in perturb:
            verts = verts + perturb[s].reshape(-1, 3)
        mesh = TriangleMesh(verts, faces, s)
        feats = fpfh(mesh, topo)
        pseudo = None
        if layer_type == "spline":
            pseudo = compute_pseudo(mesh, topo, normalizer=sd.normalizer)
        batch[s] = {
            "x": feats,
            "topology": topo,
            "pseudo": pseudo,
            "segment": segment,
            "counts": counts,
            "num_subjects": k,
        }
    return batch


def content_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
