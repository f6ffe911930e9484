"""Fast Point Feature Histograms over mesh 1-ring neighborhoods.

Each vertex gets a 33-dim descriptor: three 11-bin histograms of the
Darboux-frame angular features (alpha, phi, theta), percentage-normalized,
then mixed with distance-weighted neighbor histograms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .mesh import DegenerateGeometryError, GraphTopology, TriangleMesh, vertex_normals

NUM_BINS = 11
FEATURE_DIM = 3 * NUM_BINS

# counts degenerate Darboux frames resolved by the coordinate-axis fallback
FALLBACK_FRAME_COUNT = {"count": 0}


@dataclass(frozen=True)
class AngularTriple:
    alpha: float  # sin(alpha), in [-1, 1]
    phi: float  # in [-1, 1]
    theta: float  # radians in (-pi, pi]
    d: float  # pair distance (mm)


def pair_features(p_s, n_s, p_t, n_t) -> AngularTriple:
    """Darboux-frame features for one point pair.

    The source role goes to the point whose normal makes the smaller angle
    with the connecting vector (standard FPFH convention), so the result is
    independent of argument order up to ties.
    """
    out = pair_features_batch(
        np.asarray(p_s, dtype=np.float64)[None],
        np.asarray(n_s, dtype=np.float64)[None],
        np.asarray(p_t, dtype=np.float64)[None],
        np.asarray(n_t, dtype=np.float64)[None],
    )
    return AngularTriple(*(float(out[k][0]) for k in ("alpha", "phi", "theta", "d")))


def pair_features_batch(p_s, n_s, p_t, n_t) -> dict:
    """Vectorized pair features; all inputs (n, 3)."""
    dp = p_t - p_s
    d = np.linalg.norm(dp, axis=1)
    if (d < 1e-300).any():
        raise DegenerateGeometryError("coincident points in feature pair")
    dpn = dp / d[:, None]

    c_s = np.einsum("ij,ij->i", n_s, dpn)
    c_t = np.einsum("ij,ij->i", n_t, dpn)
    swap = np.abs(c_s) < np.abs(c_t)

    u = np.where(swap[:, None], n_t, n_s)
    other = np.where(swap[:, None], n_s, n_t)
    dpn = np.where(swap[:, None], -dpn, dpn)
    phi = np.where(swap, -c_t, c_s)

    v = np.cross(dpn, u)
    vnorm = np.linalg.norm(v, axis=1)
    degen = vnorm < 1e-12
    if degen.any():
        # connecting vector parallel to the source normal: build the frame
        # from the coordinate axis most orthogonal to u
        FALLBACK_FRAME_COUNT["count"] += int(degen.sum())
        axes = np.eye(3)
        ud = u[degen]
        pick = np.argmin(np.abs(ud), axis=1)
        vd = np.cross(axes[pick], ud)
        v[degen] = vd
        vnorm = np.linalg.norm(v, axis=1)
    v = v / vnorm[:, None]
    w = np.cross(u, v)

    alpha = np.einsum("ij,ij->i", v, other)
    theta = np.arctan2(
        np.einsum("ij,ij->i", w, other), np.einsum("ij,ij->i", u, other)
    )
    return {"alpha": alpha, "phi": phi, "theta": theta, "d": d}


def _bin_indices(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    idx = np.floor((values - lo) / (hi - lo) * NUM_BINS).astype(np.int64)
    return np.clip(idx, 0, NUM_BINS - 1)


def _spfh_all(mesh: TriangleMesh, topology: GraphTopology, normals: np.ndarray):
    """SPFH matrix (n, 33) plus the directed-edge arrays used for mixing."""
    if topology.num_nodes != mesh.num_vertices:
        raise ValueError("topology does not match mesh")
    deg = topology.degrees()
    isolated = np.where(deg == 0)[0]
    if isolated.size:
        raise DegenerateGeometryError(f"isolated vertex {int(isolated[0])}")

    centers, neighbors = topology.directed_edges()
    v = mesh.vertices
    feats = pair_features_batch(v[centers], normals[centers], v[neighbors], normals[neighbors])

    a_bin = _bin_indices(feats["alpha"], -1.0, 1.0)
    p_bin = _bin_indices(feats["phi"], -1.0, 1.0)
    t_bin = _bin_indices(feats["theta"], -np.pi, np.pi)
    base = centers * FEATURE_DIM
    flat = np.concatenate(
        [base + a_bin, base + NUM_BINS + p_bin, base + 2 * NUM_BINS + t_bin]
    )
    hist = np.bincount(flat, minlength=mesh.num_vertices * FEATURE_DIM).astype(
        np.float64
    )
    hist = hist.reshape(mesh.num_vertices, FEATURE_DIM)
    # each sub-histogram holds `deg` counts; normalize to percentages
    hist *= (100.0 / deg)[:, None]
    return hist, centers, neighbors, feats["d"]


def spfh(vertex: int, mesh: TriangleMesh, topology: GraphTopology, normals: np.ndarray) -> np.ndarray:
    """Simplified point feature histogram of one vertex (33-vector)."""
    hist, _, _, _ = _spfh_all(mesh, topology, normals)
    return hist[vertex]


def fpfh(mesh: TriangleMesh, topology: GraphTopology, normals: np.ndarray | None = None) -> np.ndarray:
    """FPFH node features, shape (n, 33), float32.

    FPFH(p) = SPFH(p) + (1/k) sum_i SPFH(p_i) / ||p - p_i|| over the 1-ring.
    """
    if normals is None:
        normals = vertex_normals(mesh)
    hist, centers, neighbors, dist = _spfh_all(mesh, topology, normals)
    # distance-weighted neighbor mixing as one sparse adjacency product
    from scipy import sparse

    n = mesh.num_vertices
    weights = sparse.csr_matrix(
        (1.0 / dist, (centers, neighbors)), shape=(n, n)
    )
    mixed = weights @ hist
    deg = topology.degrees().astype(np.float64)
    out = hist + mixed / deg[:, None]
    return out.astype(np.float32)


MAGIC = b"MFF1"


class FeatureFileError(ValueError):
    pass


def write_features(path, features: np.ndarray) -> None:
    f = np.ascontiguousarray(features, dtype=np.float32)
    if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
        raise FeatureFileError(f"features must be (n, {FEATURE_DIM}), got {f.shape}")
    with open(str(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", f.shape[0], f.shape[1]))
        fh.write(f.astype("<f4").tobytes())


def read_features(path) -> np.ndarray:
    with open(str(path), "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {raw[:4]!r}")
    n, dim = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != 4 * n * dim:
        raise FeatureFileError(f"{path}: truncated payload")
    feats = np.frombuffer(payload, dtype="<f4").reshape(n, dim)
    if not np.isfinite(feats).all():
        raise FeatureFileError(f"{path}: non-finite feature value")
    return np.array(feats, dtype=np.float32)
