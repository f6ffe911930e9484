"""Closed-form rigid registration of corresponded point sets (Umeyama).

Meshes are registered structure-by-structure onto a reference subject using
index correspondence; no ICP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh
from .structures import STRUCTURES


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `inner` first, then `self`."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )

    def flat(self) -> list[float]:
        """12 floats: row-major rotation then translation."""
        return [*self.rotation.ravel().tolist(), *self.translation.tolist()]

    @classmethod
    def from_flat(cls, values) -> "RigidTransform":
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:9].reshape(3, 3), values[9:12])


def umeyama_rigid(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping source onto target.

    Points are corresponded by index. Scale is fixed to 1.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise RegistrationError(
            f"point sets must both be (n, 3); got {src.shape} and {tgt.shape}"
        )
    n = src.shape[0]
    if n < 3:
        raise RegistrationError(f"need at least 3 points, got {n}")
    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    cov = (tgt - mu_t).T @ (src - mu_s) / n
    u, d, vt = np.linalg.svd(cov)
    scale = max(d[0], 1.0)
    if d[1] <= scale * 1e-12:
        raise RegistrationError(
            "degenerate configuration: source points are collinear or coincident"
        )
    s = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    return RigidTransform(rot, mu_t - rot @ mu_s)


def apply_transform(t: RigidTransform, mesh: TriangleMesh) -> TriangleMesh:
    return mesh.with_vertices(t.apply(mesh.vertices))


def align_dataset(
    meshes: dict[str, dict[str, TriangleMesh]],
    reference_subject: str | None = None,
):
    """Register every subject's structures onto a reference subject's.

    `meshes` maps subject id -> structure id -> mesh. Returns
    (aligned meshes in the same layout, transform log keyed
    (subject, structure) -> RigidTransform). The reference defaults to the
    lexicographically first subject id.
    """
    if not meshes:
        raise RegistrationError("empty dataset")
    subjects = sorted(meshes)
    ref = reference_subject if reference_subject is not None else subjects[0]
    if ref not in meshes:
        raise RegistrationError(f"reference subject {ref!r} not in dataset")

    problems = []
    for subj in subjects:
        missing = [s for s in STRUCTURES if s not in meshes[subj]]
        if missing:
            problems.append(f"subject {subj!r} missing structures: {missing}")
    if problems:
        raise RegistrationError("; ".join(problems))
    for subj in subjects:
        bad = [
            s
            for s in STRUCTURES
            if meshes[subj][s].num_vertices != meshes[ref][s].num_vertices
        ]
        if bad:
            raise RegistrationError(
                f"subject {subj!r} vertex counts differ from reference"
                f" {ref!r} for structures: {bad}"
            )

    aligned: dict[str, dict[str, TriangleMesh]] = {}
    log: dict[tuple[str, str], RigidTransform] = {}
    for subj in subjects:
        aligned[subj] = {}
        for struct in STRUCTURES:
            if subj == ref:
                t = RigidTransform.identity()
            else:
                t = umeyama_rigid(
                    meshes[subj][struct].vertices, meshes[ref][struct].vertices
                )
            aligned[subj][struct] = apply_transform(t, meshes[subj][struct])
            log[(subj, struct)] = t
    return aligned, log
