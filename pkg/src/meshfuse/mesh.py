"""Triangle mesh loading, validation, graph extraction, and vertex normals.

Supported file formats are ASCII OFF and ASCII PLY; binary files are
rejected. Vertex order is preserved exactly as stored, since cross-subject
correspondence relies on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .structures import validate_structure


class MeshFormatError(ValueError):
    """Raised for unparseable or invalid mesh files."""


class DegenerateGeometryError(ValueError):
    """Raised when geometry is too degenerate to process (e.g. zero normals)."""


@dataclass(frozen=True)
class TriangleMesh:
    """Surface mesh of one structure of one subject. Coordinates in mm."""

    vertices: np.ndarray  # (n, 3) float64
    faces: np.ndarray  # (m, 3) int64
    structure_id: str = "brainstem"

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        validate_structure(self.structure_id)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshFormatError(f"vertices must be (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshFormatError(f"faces must be (m, 3), got {f.shape}")
        if v.shape[0] < 4:
            raise MeshFormatError(f"mesh has {v.shape[0]} vertices, need at least 4")
        if f.shape[0] < 1:
            raise MeshFormatError("mesh has no faces")
        if not np.isfinite(v).all():
            raise MeshFormatError("non-finite vertex coordinate")
        if f.min() < 0 or f.max() >= v.shape[0]:
            bad = int(f.max() if f.max() >= v.shape[0] else f.min())
            raise MeshFormatError(
                f"face index {bad} out of range for {v.shape[0]} vertices"
            )
        if (
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        ).any():
            raise MeshFormatError("face repeats a vertex within itself")

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, self.structure_id)


@dataclass(frozen=True)
class GraphTopology:
    """Undirected 1-ring graph of a mesh: deduplicated (min, max) edges."""

    num_nodes: int
    edges: np.ndarray  # (e, 2) int64, canonical order

    def __post_init__(self):
        e = np.ascontiguousarray(np.asarray(self.edges, dtype=np.int64))
        object.__setattr__(self, "edges", e)
        if e.ndim != 2 or e.shape[1] != 2:
            raise ValueError(f"edges must be (e, 2), got {e.shape}")
        if e.shape[0]:
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise ValueError("edge endpoint out of range")
            if (e[:, 0] >= e[:, 1]).any():
                raise ValueError("edges must be canonical (min, max) pairs")

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Both orientations of every edge as (centers, neighbors) arrays."""
        a, b = self.edges[:, 0], self.edges[:, 1]
        return np.concatenate([a, b]), np.concatenate([b, a])

    def degrees(self) -> np.ndarray:
        return np.bincount(
            self.edges.ravel(), minlength=self.num_nodes
        ).astype(np.int64)


def _strip_off_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def _parse_off(text: str, path: str, structure: str) -> TriangleMesh:
    lines = list(_strip_off_lines(text))
    if not lines or lines[0][1] != "OFF":
        raise MeshFormatError(f"{path}:1: missing OFF header")
    if len(lines) < 2:
        raise MeshFormatError(f"{path}: truncated OFF file")
    lineno, counts = lines[1]
    parts = counts.split()
    if len(parts) < 2:
        raise MeshFormatError(f"{path}:{lineno}: bad counts line {counts!r}")
    nv, nf = int(parts[0]), int(parts[1])
    body = lines[2:]
    if len(body) < nv + nf:
        raise MeshFormatError(f"{path}: expected {nv} vertices and {nf} faces")
    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        lineno, line = body[i]
        vals = line.split()
        if len(vals) != 3:
            raise MeshFormatError(f"{path}:{lineno}: expected 3 coordinates")
        try:
            verts[i] = [float(x) for x in vals]
        except ValueError as exc:
            raise MeshFormatError(f"{path}:{lineno}: {exc}") from None
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        lineno, line = body[nv + i]
        vals = line.split()
        if len(vals) != 4 or vals[0] != "3":
            raise MeshFormatError(f"{path}:{lineno}: only triangular faces supported")
        faces[i] = [int(x) for x in vals[1:]]
        if faces[i].min() < 0 or faces[i].max() >= nv:
            raise MeshFormatError(
                f"{path}:{lineno}: face index out of range for {nv} vertices"
            )
    try:
        return TriangleMesh(verts, faces, structure)
    except MeshFormatError as exc:
        raise MeshFormatError(f"{path}: {exc}") from None


def _parse_ply(text: str, path: str, structure: str) -> TriangleMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(f"{path}:1: missing ply header")
    elements = []  # (name, count, [property names])
    i = 1
    fmt_seen = False
    while i < len(lines):
        tok = lines[i].strip().split()
        i += 1
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] != "ascii":
                raise MeshFormatError(f"{path}:{i}: binary PLY not supported")
            fmt_seen = True
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError(f"{path}:{i}: property before element")
            elements[-1][2].append(tok[-1])
        elif tok[0] == "end_header":
            break
    else:
        raise MeshFormatError(f"{path}: missing end_header")
    if not fmt_seen:
        raise MeshFormatError(f"{path}: missing format line")

    verts = None
    faces = None
    nv = 0
    for name, count, props in elements:
        if name == "vertex":
            for axis in ("x", "y", "z"):
                if axis not in props:
                    raise MeshFormatError(f"{path}: vertex element lacks {axis}")
            cols = [props.index(a) for a in ("x", "y", "z")]
            verts = np.empty((count, 3), dtype=np.float64)
            nv = count
            for j in range(count):
                lineno = i + j + 1
                vals = lines[i + j].split()
                if len(vals) != len(props):
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex line")
                verts[j] = [float(vals[c]) for c in cols]
            i += count
        elif name == "face":
            faces = np.empty((count, 3), dtype=np.int64)
            for j in range(count):
                lineno = i + j + 1
                vals = lines[i + j].split()
                if not vals or vals[0] != "3":
                    raise MeshFormatError(
                        f"{path}:{lineno}: only triangular faces supported"
                    )
                faces[j] = [int(v) for v in vals[1:4]]
                if faces[j].min() < 0 or faces[j].max() >= nv:
                    raise MeshFormatError(
                        f"{path}:{lineno}: face index out of range for {nv} vertices"
                    )
            i += count
        else:
            i += count  # skip unknown elements
    if verts is None or faces is None:
        raise MeshFormatError(f"{path}: PLY needs vertex and face elements")
    try:
        return TriangleMesh(verts, faces, structure)
    except MeshFormatError as exc:
        raise MeshFormatError(f"{path}: {exc}") from None


def load_mesh(path, structure: str = "brainstem") -> TriangleMesh:
    """Load an ASCII OFF or ASCII PLY mesh, preserving vertex order."""
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise MeshFormatError(f"{path}: binary mesh files are not supported") from None
    head = text.lstrip()[:4].lower()
    if head.startswith("ply"):
        return _parse_ply(text, path, structure)
    return _parse_off(text, path, structure)


def save_off(mesh: TriangleMesh, path) -> None:
    with open(str(path), "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.num_vertices} {mesh.num_faces} 0\n")
        for v in mesh.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def mesh_to_graph(mesh: TriangleMesh) -> GraphTopology:
    """Undirected 1-ring topology: the union of the edges of every face."""
    f = mesh.faces
    pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [0, 2]]])
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    return GraphTopology(mesh.num_vertices, pairs)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted per-vertex unit normals (CCW winding convention)."""
    v, f = mesh.vertices, mesh.faces
    # cross product of edge vectors = 2 * area * unit normal, so summing the
    # raw cross products is exactly area weighting
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    idx = f.ravel()
    rep = np.repeat(fn, 3, axis=0)
    for c in range(3):
        acc[:, c] = np.bincount(idx, weights=rep[:, c], minlength=v.shape[0])
    norms = np.linalg.norm(acc, axis=1)
    bad = np.where(norms < 1e-300)[0]
    if bad.size:
        raise DegenerateGeometryError(
            f"vertex {int(bad[0])} has a zero accumulated normal"
        )
    return acc / norms[:, None]
