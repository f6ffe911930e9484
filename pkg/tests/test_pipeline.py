import json

import numpy as np
import pytest

from meshfuse.data import load_manifest
from meshfuse.fpfh import fpfh, read_features
from meshfuse.mesh import TriangleMesh, load_mesh
from meshfuse.pipeline import batch_inputs, preprocess, stacked_graph
from meshfuse.structures import STRUCTURES
from meshfuse.synth import SynthConfig, generate_synthetic


@pytest.fixture(scope="module")
def bundle_and_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    manifest = generate_synthetic(
        SynthConfig(num_subjects=10, seed=5, resolution=1), out
    )
    return preprocess(manifest), out, manifest


def test_preprocess_aligns_all_subjects(bundle_and_dir):
    bundle, _, _ = bundle_and_dir
    assert bundle.num_subjects == 10
    assert bundle.reference_subject == "subj_0000"
    assert set(bundle.structures) == set(STRUCTURES)
    # all structures aligned onto the same base geometry: radii per vertex
    # index agree across subjects (shape noise aside, positions match closely)
    sd = bundle.structures["brainstem"]
    assert sd.vertices.shape == (10, 42, 3)
    spread = sd.vertices.std(axis=0).max()
    base_scale = np.abs(sd.vertices).max()
    assert spread < 0.2 * base_scale
    assert not np.isnan(bundle.ages).any()
    assert (bundle.diagnoses == -1).all()
    assert bundle.embeddings.shape[0] == 10


def test_split_indices_partition(bundle_and_dir):
    bundle, _, _ = bundle_and_dir
    idx = np.concatenate(
        [bundle.split_indices(s) for s in ("train", "val", "test")]
    )
    assert sorted(idx.tolist()) == list(range(10))


def test_persisted_artifacts(tmp_path):
    manifest = generate_synthetic(
        SynthConfig(num_subjects=10, seed=6, resolution=1), tmp_path / "ds"
    )
    out = tmp_path / "pre"
    bundle = preprocess(manifest, out_dir=out)
    with open(out / "transforms.json") as fh:
        transforms = json.load(fh)
    assert len(transforms) == 10 * len(STRUCTURES)
    assert all(len(v) == 12 for v in transforms.values())
    with open(out / "pseudo_norm.json") as fh:
        norms = json.load(fh)
    assert all(norms[s] > 0 for s in STRUCTURES)
    aligned = load_mesh(out / "aligned" / "subj_0002" / "brainstem.off", "brainstem")
    np.testing.assert_allclose(
        aligned.vertices,
        bundle.structures["brainstem"].vertices[2],
        atol=1e-12,
    )
    feats = read_features(out / "features" / "subj_0002" / "brainstem.mff")
    topo = bundle.structures["brainstem"].topology
    np.testing.assert_array_equal(feats, fpfh(aligned, topo))


def test_stacked_graph_disjoint_union(bundle_and_dir):
    bundle, _, _ = bundle_and_dir
    sd = bundle.structures["thalamus_l"]
    verts, faces, topo, segment, counts = stacked_graph(sd, np.array([1, 3]))
    n = sd.topology.num_nodes
    assert verts.shape == (2 * n, 3)
    assert topo.num_nodes == 2 * n
    assert topo.num_edges == 2 * sd.topology.num_edges
    # no edge crosses the subject boundary
    blocks = topo.edges // n
    assert (blocks[:, 0] == blocks[:, 1]).all()
    np.testing.assert_array_equal(segment, np.repeat([0, 1], n))
    np.testing.assert_array_equal(counts, [n, n])


def test_batch_inputs_features_match_single_mesh(bundle_and_dir):
    bundle, _, _ = bundle_and_dir
    batch = batch_inputs(bundle, np.array([0, 4]), "gcn")
    sd = bundle.structures["brainstem"]
    n = sd.topology.num_nodes
    single = fpfh(
        TriangleMesh(sd.vertices[4], sd.faces, "brainstem"), sd.topology
    )
    np.testing.assert_allclose(batch["brainstem"]["x"][n:], single, atol=1e-5)
    assert batch["brainstem"]["pseudo"] is None
    spline_batch = batch_inputs(bundle, np.array([0]), "spline")
    u = spline_batch["brainstem"]["pseudo"]
    assert u.shape == (2 * sd.topology.num_edges, 3)
    assert u.min() >= 0 and u.max() <= 1


def test_batch_inputs_perturbation_changes_features(bundle_and_dir):
    bundle, _, _ = bundle_and_dir
    idx = np.array([0])
    base = batch_inputs(bundle, idx, "gcn")
    sd = bundle.structures["hippocampus_l"]
    rng = np.random.default_rng(0)
    perturb = {
        "hippocampus_l": rng.uniform(-0.1, 0.1, size=(1, sd.topology.num_nodes, 3))
    }
    shifted = batch_inputs(bundle, idx, "gcn", perturb)
    assert not np.allclose(
        shifted["hippocampus_l"]["x"], base["hippocampus_l"]["x"]
    )
    np.testing.assert_array_equal(shifted["brainstem"]["x"], base["brainstem"]["x"])


def test_preprocess_with_explicit_reference(bundle_and_dir):
    _, out, manifest = bundle_and_dir
    bundle = preprocess(manifest, reference_subject="subj_0003")
    assert bundle.reference_subject == "subj_0003"
