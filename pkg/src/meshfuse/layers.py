"""Graph convolution layers over mesh topologies.

GCN uses symmetric degree normalization with self-loops; SplineConv uses a
degree-1 open-B-spline kernel over per-edge pseudo-coordinates with a
separate root weight and mean aggregation. Both run on the autodiff tape via
row gather and scatter-sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .mesh import DegenerateGeometryError, GraphTopology, TriangleMesh

PSEUDO_CLAMP_COUNT = {"count": 0}


class _OperatorCache:
    """Keyed cache for aggregation operators; anchors keep key objects alive
    so ids cannot be recycled while an entry exists."""

    def __init__(self, maxsize: int = 256):
        self.maxsize = maxsize
        self._entries: dict = {}

    def get(self, key, anchor, build):
        entry = self._entries.get(key)
        if entry is not None and entry[0] is anchor:
            return entry[1]
        value = build()
        if len(self._entries) >= self.maxsize:
            self._entries.clear()
        self._entries[key] = (anchor, value)
        return value


_GCN_OPS = _OperatorCache()
_SPLINE_OPS = _OperatorCache()
_POOL_OPS = _OperatorCache()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class GcnLayer:
    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(f"{name}.weight", Tensor(glorot(rng, in_dim, out_dim, dtype=dtype)))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(out_dim, dtype=dtype)))

    def parameters(self):
        return [self.weight, self.bias]


def gcn_edge_arrays(topology: GraphTopology):
    """(src, dst, coef) for the normalized adjacency with self-loops."""
    centers, neighbors = topology.directed_edges()
    n = topology.num_nodes
    self_idx = np.arange(n, dtype=np.int64)
    src = np.concatenate([neighbors, self_idx])
    dst = np.concatenate([centers, self_idx])
    dhat = topology.degrees().astype(np.float64) + 1.0
    coef = 1.0 / np.sqrt(dhat[src] * dhat[dst])
    return src, dst, coef


def _gcn_operator(topology: GraphTopology, dtype):
    from scipy import sparse

    def build():
        src, dst, coef = gcn_edge_arrays(topology)
        n = topology.num_nodes
        mat = sparse.csr_matrix(
            (coef.astype(dtype), (dst, src)), shape=(n, n)
        )
        return mat, mat.T.tocsr()

    return _GCN_OPS.get((id(topology), np.dtype(dtype)), topology, build)


def gcn_forward(layer: GcnLayer, x: Tensor, topology: GraphTopology) -> Tensor:
    """H' = D^{-1/2} (A + I) D^{-1/2} H W + b via per-edge normalized sums.

    The normalized-adjacency coefficients are constant per topology, so they
    are cached as one sparse aggregation operator.
    """
    if x.shape[0] != topology.num_nodes or x.shape[1] != layer.in_dim:
        raise ad.ShapeError(
            f"gcn_forward: features {x.shape} vs {topology.num_nodes} nodes,"
            f" in_dim {layer.in_dim}"
        )
    h = ad.matmul(x, layer.weight.tensor)
    agg = ad.fixed_linear(_gcn_operator(topology, x.dtype), h)
    return ad.add(agg, layer.bias.tensor)


class SplineLayer:
    """Degree-1 tensor-product B-spline convolution, kernel k per dimension."""

    def __init__(self, name: str, in_dim: int, out_dim: int, kernel_size: int,
                 rng: np.random.Generator, dtype=np.float32):
        if kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.kernel_size = kernel_size
        self.degree = 1
        k3 = kernel_size ** 3
        self.basis_weight = Parameter(
            f"{name}.basis_weight",
            Tensor(glorot(rng, in_dim, out_dim, shape=(k3, in_dim, out_dim), dtype=dtype)),
        )
        self.root_weight = Parameter(
            f"{name}.root_weight", Tensor(glorot(rng, in_dim, out_dim, dtype=dtype))
        )
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(out_dim, dtype=dtype)))

    def parameters(self):
        return [self.basis_weight, self.root_weight, self.bias]


def spline_basis(u: np.ndarray, kernel_size: int):
    """Active B-spline products for pseudo-coordinates u, shape (e, 3).

    Returns (values, flat kernel indices), each (e, 8); values per row sum
    to 1. Degree 1 only: per dimension the two active basis functions at
    position p = u*(k-1) are 1-frac(p) and frac(p).
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if ((u < 0) | (u > 1)).any():
        PSEUDO_CLAMP_COUNT["count"] += int(((u < 0) | (u > 1)).sum())
        u = np.clip(u, 0.0, 1.0)
    k = kernel_size
    if k == 1:
        e = u.shape[0]
        vals = np.zeros((e, 8))
        vals[:, 0] = 1.0
        return vals, np.zeros((e, 8), dtype=np.int64)
    p = u * (k - 1)
    lo = np.minimum(np.floor(p), k - 2).astype(np.int64)  # keep lo+1 in range
    frac = p - lo
    # per-dimension (value, index) pairs for the two active functions
    vals_dim = np.stack([1.0 - frac, frac], axis=2)  # (e, 3, 2)
    idx_dim = np.stack([lo, lo + 1], axis=2)  # (e, 3, 2)
    e = u.shape[0]
    vals = np.ones((e, 8))
    idx = np.zeros((e, 8), dtype=np.int64)
    for slot in range(8):
        bits = (slot & 1, (slot >> 1) & 1, (slot >> 2) & 1)
        flat = np.zeros(e, dtype=np.int64)
        prod = np.ones(e)
        for dim, bit in enumerate(bits):
            prod = prod * vals_dim[:, dim, bit]
            flat = flat * k + idx_dim[:, dim, bit]
        vals[:, slot] = prod
        idx[:, slot] = flat
    return vals, idx


def dense_basis_matrix(u: np.ndarray, kernel_size: int) -> np.ndarray:
    """(e, k^3) basis matrix with the active products filled in."""
    vals, idx = spline_basis(u, kernel_size)
    e = vals.shape[0]
    mat = np.zeros((e, kernel_size ** 3))
    np.add.at(mat, (np.repeat(np.arange(e), 8), idx.ravel()), vals.ravel())
    return mat


def spline_forward(layer: SplineLayer, x: Tensor, topology: GraphTopology,
                   pseudo: np.ndarray) -> Tensor:
    """x_i' = x_i W_root + mean_j sum_b B_b(u(i,j)) x_j W_b + bias."""
    centers, neighbors = topology.directed_edges()
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if pseudo.shape != (centers.shape[0], 3):
        raise ad.ShapeError(
            f"spline_forward: pseudo shape {pseudo.shape}, expected"
            f" ({centers.shape[0]}, 3)"
        )
    n = topology.num_nodes
    root = ad.matmul(x, layer.root_weight.tensor)
    if centers.shape[0] == 0:
        return ad.add(root, layer.bias.tensor)
    k3 = layer.kernel_size ** 3
    # precompute x W_b for every kernel b; the basis products and the
    # neighbor mean are one constant sparse operator per (pseudo, k)
    w2 = ad.reshape(
        ad.transpose(layer.basis_weight.tensor, (1, 0, 2)),
        (layer.in_dim, k3 * layer.out_dim),
    )
    h_all = ad.reshape(ad.matmul(x, w2), (n * k3, layer.out_dim))
    op = _spline_operator(pseudo, layer.kernel_size, topology, x.dtype)
    agg = ad.fixed_linear(op, h_all)
    return ad.add(ad.add(agg, root), layer.bias.tensor)


def _spline_operator(pseudo: np.ndarray, kernel_size: int, topology: GraphTopology, dtype):
    from scipy import sparse

    def build():
        centers, neighbors = topology.directed_edges()
        vals, idx = spline_basis(pseudo, kernel_size)
        k3 = kernel_size ** 3
        n = topology.num_nodes
        deg = topology.degrees().astype(np.float64)
        inv_deg = np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)
        rows = np.repeat(centers, 8)
        cols = (neighbors[:, None] * k3 + idx).ravel()
        data = (vals * inv_deg[centers][:, None]).ravel().astype(dtype)
        mat = sparse.csr_matrix((data, (rows, cols)), shape=(n, n * k3))
        return mat, mat.T.tocsr()

    return _SPLINE_OPS.get(
        (id(pseudo), kernel_size, np.dtype(dtype)), pseudo, build
    )


def pseudo_normalizer(mesh: TriangleMesh, topology: GraphTopology) -> float:
    """Max-abs displacement component over the mesh's edges (scale r)."""
    centers, neighbors = topology.directed_edges()
    disp = mesh.vertices[neighbors] - mesh.vertices[centers]
    r = float(np.abs(disp).max())
    if r <= 0:
        raise DegenerateGeometryError("all edges have zero displacement")
    return r


def compute_pseudo(mesh: TriangleMesh, topology: GraphTopology,
                   normalizer: float | None = None) -> np.ndarray:
    """Per-directed-edge pseudo-coordinates u = disp/(2r) + 0.5 in [0,1]^3.

    `normalizer` is the reference mesh's scale r; defaults to this mesh's.
    Rows align with topology.directed_edges() (center, neighbor) order.
    """
    r = normalizer if normalizer is not None else pseudo_normalizer(mesh, topology)
    if r <= 0:
        raise DegenerateGeometryError("pseudo-coordinate normalizer must be > 0")
    centers, neighbors = topology.directed_edges()
    u = (mesh.vertices[neighbors] - mesh.vertices[centers]) / (2.0 * r) + 0.5
    out_of_range = ((u < 0) | (u > 1)).sum()
    if out_of_range:
        PSEUDO_CLAMP_COUNT["count"] += int(out_of_range)
        u = np.clip(u, 0.0, 1.0)
    return u


def global_average_pool(x: Tensor) -> Tensor:
    if x.shape[0] < 1:
        raise ad.ShapeError("global_average_pool: empty graph")
    return ad.mean(x, axis=0)


def segment_average_pool(x: Tensor, segment: np.ndarray, num_segments: int,
                         counts: np.ndarray) -> Tensor:
    """Per-graph average pooling for a batched (disjoint-union) graph."""
    from scipy import sparse

    def build():
        weights = (1.0 / counts.astype(np.float64))[segment].astype(x.dtype)
        mat = sparse.csr_matrix(
            (weights, (segment, np.arange(segment.size))),
            shape=(num_segments, segment.size),
        )
        return mat, mat.T.tocsr()

    op = _POOL_OPS.get(
        (id(segment), num_segments, np.dtype(x.dtype)), segment, build
    )
    return ad.fixed_linear(op, x)
