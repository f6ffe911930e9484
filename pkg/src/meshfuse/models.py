"""Shape submodels, the 15-structure multi-graph encoder, and predictors.

One GNN submodel per structure (no weight sharing), three conv layers with
ReLU and global average pooling each, embeddings concatenated through two FC
layers. Heads are small MLPs consuming the shape embedding, the image
embedding, or their concatenation (fusion).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .fpfh import FEATURE_DIM
from .layers import (
    GcnLayer,
    SplineLayer,
    gcn_forward,
    global_average_pool,
    glorot,
    segment_average_pool,
    spline_forward,
)
from .mesh import GraphTopology
from .structures import STRUCTURES


@dataclass
class ModelConfig:
    task: str = "regression"  # or "classification"
    layer_type: str = "gcn"  # or "spline"
    hidden: tuple = (32, 32, 32)
    fc_dims: tuple = (128, 64)
    head_hidden: int = 128  # 0 gives a pure linear head
    kernel_size: int = 5
    image_dim: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.layer_type not in ("gcn", "spline"):
            raise ValueError(f"unknown layer_type {self.layer_type!r}")
        self.hidden = tuple(self.hidden)
        self.fc_dims = tuple(self.fc_dims)
        if len(self.hidden) != 3:
            raise ValueError("submodels have exactly 3 conv layers")
        if len(self.fc_dims) != 2:
            raise ValueError("encoder has exactly 2 FC layers")

    @property
    def out_dim(self) -> int:
        return 1 if self.task == "regression" else 2

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Linear:
    def __init__(self, name, in_dim, out_dim, rng, dtype=np.float32):
        self.weight = Parameter(f"{name}.weight", Tensor(glorot(rng, in_dim, out_dim, dtype=dtype)))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(out_dim, dtype=dtype)))

    def forward(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight.tensor), self.bias.tensor)

    def parameters(self):
        return [self.weight, self.bias]


class ShapeSubmodel:
    """3 graph-conv layers with ReLU; readout is global average pooling."""

    def __init__(self, name, cfg: ModelConfig, rng, dtype=np.float32):
        dims = (FEATURE_DIM,) + cfg.hidden
        self.layer_type = cfg.layer_type
        self.convs = []
        for i in range(3):
            lname = f"{name}.conv{i + 1}"
            if cfg.layer_type == "gcn":
                self.convs.append(GcnLayer(lname, dims[i], dims[i + 1], rng, dtype))
            else:
                self.convs.append(
                    SplineLayer(lname, dims[i], dims[i + 1], cfg.kernel_size, rng, dtype)
                )

    def node_features(self, x: Tensor, topology: GraphTopology, pseudo=None) -> Tensor:
        if self.layer_type == "spline" and pseudo is None:
            raise ValueError("spline submodels require pseudo-coordinates")
        for conv in self.convs:
            if self.layer_type == "gcn":
                x = gcn_forward(conv, x, topology)
            else:
                x = spline_forward(conv, x, topology, pseudo)
            x = ad.relu(x)
        return x

    def parameters(self):
        return [p for conv in self.convs for p in conv.parameters()]


def shape_embed(submodel: ShapeSubmodel, features, topology: GraphTopology, pseudo=None) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(features)
    return global_average_pool(submodel.node_features(x, topology, pseudo))


class MultiGraphEncoder:
    """15 per-structure submodels plus two FC layers over the concatenation."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.submodels = {
            s: ShapeSubmodel(f"submodel.{s}", cfg, rng, dtype) for s in STRUCTURES
        }
        concat_dim = len(STRUCTURES) * cfg.hidden[-1]
        self.fc1 = Linear("encoder.fc1", concat_dim, cfg.fc_dims[0], rng, dtype)
        self.fc2 = Linear("encoder.fc2", cfg.fc_dims[0], cfg.fc_dims[1], rng, dtype)

    @property
    def embedding_dim(self) -> int:
        return self.cfg.fc_dims[1]

    def encode_batch(self, batch) -> Tensor:
        """Subject embeddings (num_subjects, f2) from per-structure batches.

        `batch` maps structure id -> dict with keys x (Tensor or array of
        stacked node features), topology (disjoint-union GraphTopology),
        pseudo (or None), segment (node -> subject index), counts
        (nodes per subject), num_subjects.
        """
        embs = []
        num_subjects = None
        for s in STRUCTURES:
            if s not in batch:
                raise ValueError(f"missing structure {s!r} in batch")
            b = batch[s]
            num_subjects = b["num_subjects"]
            x = b["x"] if isinstance(b["x"], Tensor) else Tensor(b["x"])
            nodes = self.submodels[s].node_features(x, b["topology"], b.get("pseudo"))
            embs.append(
                segment_average_pool(nodes, b["segment"], num_subjects, b["counts"])
            )
        h = ad.concat(embs, axis=1)
        return self.fc2.forward(ad.relu(self.fc1.forward(h)))

    def parameters(self):
        params = [p for s in STRUCTURES for p in self.submodels[s].parameters()]
        return params + self.fc1.parameters() + self.fc2.parameters()


def multi_graph_forward(encoder: MultiGraphEncoder, subject: dict) -> Tensor:
    """Embedding (f2,) of one subject given structure -> (features, topology[, pseudo])."""
    missing = [s for s in STRUCTURES if s not in subject]
    if missing:
        raise ValueError(f"subject missing structures: {missing}")
    batch = {}
    for s in STRUCTURES:
        entry = subject[s]
        feats, topo = entry[0], entry[1]
        pseudo = entry[2] if len(entry) > 2 else None
        x = feats if isinstance(feats, Tensor) else Tensor(feats)
        batch[s] = {
            "x": x,
            "topology": topo,
            "pseudo": pseudo,
            "segment": np.zeros(topo.num_nodes, dtype=np.int64),
            "counts": np.array([topo.num_nodes]),
            "num_subjects": 1,
        }
    return ad.reshape(encoder.encode_batch(batch), (-1,))


class MlpHead:
    """Predictor head: one hidden ReLU layer by default, or pure linear."""

    def __init__(self, name, in_dim, cfg: ModelConfig, rng, dtype=np.float32):
        self.in_dim = in_dim
        if cfg.head_hidden > 0:
            self.fc1 = Linear(f"{name}.fc1", in_dim, cfg.head_hidden, rng, dtype)
            self.fc2 = Linear(f"{name}.fc2", cfg.head_hidden, cfg.out_dim, rng, dtype)
        else:
            self.fc1 = None
            self.fc2 = Linear(f"{name}.out", in_dim, cfg.out_dim, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.fc1 is not None:
            x = ad.relu(self.fc1.forward(x))
        return self.fc2.forward(x)

    def parameters(self):
        params = [] if self.fc1 is None else self.fc1.parameters()
        return params + self.fc2.parameters()


def predict(head: MlpHead, shape_emb=None, image_emb=None, task: str = "regression") -> Tensor:
    """Head output for one subject or a batch; fusion concatenates both."""

    def as2d(v):
        if v is None:
            return None
        t = v if isinstance(v, Tensor) else Tensor(v)
        return ad.reshape(t, (1, -1)) if t.data.ndim == 1 else t

    shape_emb, image_emb = as2d(shape_emb), as2d(image_emb)
    if shape_emb is None and image_emb is None:
        raise ValueError("predict requires at least one embedding")
    parts = [e for e in (shape_emb, image_emb) if e is not None]
    x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    if x.shape[1] != head.in_dim:
        raise ad.ShapeError(
            f"head expects input dim {head.in_dim}, got {x.shape[1]}"
        )
    return head.forward(x)
