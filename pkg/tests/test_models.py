import numpy as np
import pytest

from meshfuse import autodiff as ad
from meshfuse.autodiff import Tensor
from meshfuse.fpfh import FEATURE_DIM
from meshfuse.mesh import mesh_to_graph
from meshfuse.layers import compute_pseudo
from meshfuse.models import (
    MlpHead,
    ModelConfig,
    MultiGraphEncoder,
    ShapeSubmodel,
    multi_graph_forward,
    predict,
    shape_embed,
)
from meshfuse.structures import STRUCTURES


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(task="segmentation")
    with pytest.raises(ValueError):
        ModelConfig(layer_type="gat")
    with pytest.raises(ValueError):
        ModelConfig(hidden=(32, 32))
    cfg = ModelConfig(task="classification")
    assert cfg.out_dim == 2
    assert ModelConfig().out_dim == 1
    again = ModelConfig.from_dict(
        __import__("json").loads(cfg.to_json())
    )
    assert again == cfg


def test_submodel_has_three_convs_and_unique_param_names():
    rng = np.random.default_rng(0)
    sub = ShapeSubmodel("submodel.brainstem", ModelConfig(), rng)
    assert len(sub.convs) == 3
    names = [p.name for p in sub.parameters()]
    assert len(names) == len(set(names))
    assert sub.convs[0].in_dim == FEATURE_DIM


def test_shape_embed_dimension(tetra):
    rng = np.random.default_rng(1)
    cfg = ModelConfig()
    sub = ShapeSubmodel("submodel.brainstem", cfg, rng)
    topo = mesh_to_graph(tetra)
    x = rng.normal(size=(4, FEATURE_DIM)).astype(np.float32)
    emb = shape_embed(sub, x, topo)
    assert emb.shape == (cfg.hidden[-1],)


def test_spline_submodel_requires_pseudo(tetra):
    rng = np.random.default_rng(2)
    sub = ShapeSubmodel("submodel.brainstem", ModelConfig(layer_type="spline", kernel_size=2), rng)
    topo = mesh_to_graph(tetra)
    x = Tensor(np.zeros((4, FEATURE_DIM), dtype=np.float32))
    with pytest.raises(ValueError, match="pseudo"):
        sub.node_features(x, topo)


def _single_subject(tetra, rng, layer_type="gcn"):
    topo = mesh_to_graph(tetra)
    pseudo = compute_pseudo(tetra, topo) if layer_type == "spline" else None
    return {
        s: (rng.normal(size=(4, FEATURE_DIM)).astype(np.float32), topo, pseudo)
        for s in STRUCTURES
    }


def test_multi_graph_forward_shapes_and_determinism(tetra):
    cfg = ModelConfig()
    rng = np.random.default_rng(3)
    encoder = MultiGraphEncoder(cfg, rng)
    subject = _single_subject(tetra, np.random.default_rng(4))
    emb = multi_graph_forward(encoder, subject)
    assert emb.shape == (cfg.fc_dims[1],)
    again = multi_graph_forward(encoder, subject)
    np.testing.assert_array_equal(emb.data, again.data)
    with pytest.raises(ValueError, match="missing structures"):
        multi_graph_forward(encoder, {k: v for k, v in list(subject.items())[:3]})


def test_encoder_batch_equals_per_subject_forward(tetra):
    """Disjoint-union batching must match one-subject-at-a-time encoding."""
    cfg = ModelConfig()
    rng = np.random.default_rng(5)
    encoder = MultiGraphEncoder(cfg, rng)
    data_rng = np.random.default_rng(6)
    topo = mesh_to_graph(tetra)
    subjects = [
        {s: (data_rng.normal(size=(4, FEATURE_DIM)).astype(np.float32), topo, None)
         for s in STRUCTURES}
        for _ in range(3)
    ]
    singles = np.stack([multi_graph_forward(encoder, s).data for s in subjects])

    from meshfuse.mesh import GraphTopology

    batch = {}
    offs = np.arange(3)[:, None, None] * 4
    union_edges = (topo.edges[None] + offs).reshape(-1, 2)
    union = GraphTopology(12, union_edges)
    for s in STRUCTURES:
        x = np.concatenate([subj[s][0] for subj in subjects])
        batch[s] = {
            "x": x,
            "topology": union,
            "pseudo": None,
            "segment": np.repeat(np.arange(3), 4),
            "counts": np.full(3, 4),
            "num_subjects": 3,
        }
    batched = encoder.encode_batch(batch).data
    np.testing.assert_allclose(batched, singles, atol=1e-5)


def test_encoder_parameter_count():
    cfg = ModelConfig()
    encoder = MultiGraphEncoder(cfg, np.random.default_rng(7))
    # 15 submodels x 3 convs x (weight, bias) + 2 FC x (weight, bias)
    assert len(encoder.parameters()) == 15 * 3 * 2 + 4
    names = [p.name for p in encoder.parameters()]
    assert len(names) == len(set(names))


def test_mlp_head_variants():
    rng = np.random.default_rng(8)
    cfg = ModelConfig(task="classification")
    head = MlpHead("head", 10, cfg, rng)
    out = head.forward(Tensor(np.zeros((5, 10), dtype=np.float32)))
    assert out.shape == (5, 2)
    linear = MlpHead("head", 10, ModelConfig(head_hidden=0), rng)
    assert linear.fc1 is None
    assert len(linear.parameters()) == 2


def test_predict_fusion_concatenation():
    rng = np.random.default_rng(9)
    cfg = ModelConfig()
    head = MlpHead("head", 12, cfg, rng)
    shape_emb = rng.normal(size=4).astype(np.float32)
    image_emb = rng.normal(size=8).astype(np.float32)
    out = predict(head, shape_emb=shape_emb, image_emb=image_emb)
    assert out.shape == (1, 1)
    with pytest.raises(ValueError):
        predict(head)
    with pytest.raises(ad.ShapeError, match="dim"):
        predict(head, shape_emb=shape_emb)


def test_end_to_end_gradients_flow_to_every_parameter(tetra):
    cfg = ModelConfig(hidden=(4, 4, 4), fc_dims=(8, 4), head_hidden=4)
    rng = np.random.default_rng(10)
    encoder = MultiGraphEncoder(cfg, rng)
    head = MlpHead("head", cfg.fc_dims[1], cfg, rng)
    subject = _single_subject(tetra, np.random.default_rng(11))
    emb = multi_graph_forward(encoder, subject)
    out = predict(head, shape_emb=emb)
    loss = ad.mean(ad.reshape(ad.mul(out, out), (-1,)), axis=0)
    ad.backward(loss)
    for p in encoder.parameters() + head.parameters():
        assert p.tensor.grad is not None, p.name
