"""meshfuse: shape-and-image fusion models over brain-structure meshes.

FPFH-featurized surface meshes, closed-form rigid alignment, per-structure
graph neural networks, and fusion with externally supplied image embeddings,
evaluated for age regression and binary disease classification.
"""

__version__ = "0.1.0"

from .alignment import RigidTransform, align_dataset, apply_transform, umeyama_rigid
from .data import Manifest, load_manifest, read_embedding, save_manifest, write_embedding
from .fpfh import fpfh, pair_features, read_features, spfh, write_features
from .mesh import GraphTopology, TriangleMesh, load_mesh, mesh_to_graph, vertex_normals
from .metrics import regression_metrics, roc_and_operating_points
from .models import ModelConfig, MultiGraphEncoder, multi_graph_forward, predict, shape_embed
from .structures import STRUCTURES
from .synth import SynthConfig, generate_synthetic, icosphere
from .training import TrainConfig, multi_seed_report
