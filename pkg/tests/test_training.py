import numpy as np
import pytest

from meshfuse import autodiff as ad
from meshfuse.autodiff import Parameter, Tensor
from meshfuse.models import ModelConfig
from meshfuse.pipeline import preprocess
from meshfuse.synth import SynthConfig, generate_synthetic
from meshfuse.training import (
    AdamState,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    augment_translate,
    cross_entropy_loss,
    head_scores,
    mse_loss,
    multi_seed_report,
    report_to_csv,
    run_seed,
    target_standardizer,
    train_head_model,
    train_standalone_shape,
    write_training_log,
    TABLE1_HEADER,
    TABLE2_HEADER,
)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(seeds=())
    with pytest.raises(ValueError):
        TrainConfig(augment_strength=-1.0)


def test_adam_matches_reference_implementation():
    """One-parameter Adam against a hand-rolled reference over 50 steps."""
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=5)
    p = Parameter("p", Tensor(x0.copy()))
    state = AdamState()
    lr = 0.01
    m = np.zeros(5)
    v = np.zeros(5)
    ref = x0.copy()
    for t in range(1, 51):
        g = 2.0 * p.data  # gradient of sum(x^2)
        p.tensor.grad = g.copy()
        adam_step(state, [p], lr)
        g_ref = 2.0 * ref
        m = 0.9 * m + 0.1 * g_ref
        v = 0.999 * v + 0.001 * g_ref * g_ref
        ref = ref - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, atol=1e-12)
        p.zero_grad()


def test_adam_raises_on_nonfinite_gradient():
    p = Parameter("weights", Tensor(np.zeros(2)))
    p.tensor.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingDivergedError, match="weights"):
        adam_step(AdamState(), [p], 0.01)


def test_mse_loss_value_and_gradient():
    p = Parameter("p", Tensor(np.array([1.0, 2.0, 3.0])))
    loss = mse_loss(p.tensor, np.array([0.0, 2.0, 5.0]))
    assert float(loss.data) == pytest.approx((1 + 0 + 4) / 3)
    ad.backward(loss)
    np.testing.assert_allclose(p.tensor.grad, 2 * np.array([1.0, 0.0, -2.0]) / 3)


def test_cross_entropy_matches_manual_log_loss():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 2))
    labels = np.array([0, 1, 1, 0, 1, 0])
    loss = cross_entropy_loss(Tensor(logits), labels)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -np.log(probs[np.arange(6), labels]).mean()
    assert float(loss.data) == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError, match="class index"):
        cross_entropy_loss(Tensor(logits), np.array([0, 1, 2, 0, 1, 0]))


def test_augment_translate_bounds_and_zero_strength():
    rng = np.random.default_rng(2)
    d = augment_translate((4, 5, 3), 0.1, rng)
    assert d.shape == (4, 5, 3)
    assert np.abs(d).max() <= 0.1
    z = augment_translate((2, 2, 3), 0.0, rng)
    assert (z == 0).all()


@pytest.fixture(scope="module")
def reg_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("reg")
    manifest = generate_synthetic(
        SynthConfig(num_subjects=16, seed=9, resolution=1), out
    )
    return preprocess(manifest)


@pytest.fixture(scope="module")
def clf_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("clf")
    manifest = generate_synthetic(
        SynthConfig(num_subjects=16, seed=9, resolution=1, task="classification"), out
    )
    return preprocess(manifest)


def test_target_standardizer_uses_train_split_only(reg_bundle):
    mu, sigma = target_standardizer(reg_bundle, "regression")
    tr = reg_bundle.ages[reg_bundle.split_indices("train")]
    assert mu == pytest.approx(tr.mean())
    assert sigma == pytest.approx(tr.std())
    assert target_standardizer(reg_bundle, "classification") == (0.0, 1.0)


def test_train_standalone_shape_reduces_loss(reg_bundle):
    mcfg = ModelConfig(hidden=(8, 8, 8), fc_dims=(16, 8), head_hidden=8)
    tcfg = TrainConfig(max_epochs=15, patience=15, augment_strength=0.0)
    model = train_standalone_shape(reg_bundle, mcfg, tcfg, seed=0)
    assert model.log[-1]["train_loss"] < model.log[0]["train_loss"]
    assert 1 <= model.best_epoch <= len(model.log)


def test_training_is_seed_deterministic(reg_bundle):
    mcfg = ModelConfig(hidden=(8, 8, 8), fc_dims=(16, 8), head_hidden=8)
    tcfg = TrainConfig(max_epochs=5, patience=5)
    a = train_standalone_shape(reg_bundle, mcfg, tcfg, seed=3)
    b = train_standalone_shape(reg_bundle, mcfg, tcfg, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    c = train_standalone_shape(reg_bundle, mcfg, tcfg, seed=4)
    assert any(
        not np.array_equal(pa.data, pc.data)
        for pa, pc in zip(a.parameters(), c.parameters())
    )


def test_head_model_and_scores(reg_bundle):
    mcfg = ModelConfig(head_hidden=8)
    tcfg = TrainConfig(max_epochs=40, patience=40)
    model = train_head_model(reg_bundle.embeddings, reg_bundle, mcfg, tcfg, seed=0)
    scale = target_standardizer(reg_bundle, "regression")
    scores = head_scores(model.head, reg_bundle.embeddings, "regression", scale)
    assert scores.shape == (reg_bundle.num_subjects,)
    # predictions come back in years, not standardized units
    assert scores.std() < 80 and np.abs(scores.mean() - scale[0]) < 40


def test_head_scores_classification_probabilities(clf_bundle):
    mcfg = ModelConfig(task="classification", head_hidden=8)
    tcfg = TrainConfig(max_epochs=20, patience=20)
    model = train_head_model(clf_bundle.embeddings, clf_bundle, mcfg, tcfg, seed=0)
    p = head_scores(model.head, clf_bundle.embeddings, "classification")
    assert ((p >= 0) & (p <= 1)).all()


def test_run_seed_returns_all_variants(clf_bundle):
    mcfg = ModelConfig(
        task="classification", hidden=(8, 8, 8), fc_dims=(16, 8), head_hidden=8
    )
    tcfg = TrainConfig(max_epochs=5, patience=5)
    res = run_seed(clf_bundle, mcfg, tcfg, 0)
    assert set(res["metrics"]) == {"shape", "image", "fusion"}
    for m in res["metrics"].values():
        assert set(m) == {"auc", "tpr_at_fpr_0.15", "tpr_at_fpr_0.20", "fpr_at_tpr_0.70"}


def test_multi_seed_report_statistics(reg_bundle):
    mcfg = ModelConfig(hidden=(8, 8, 8), fc_dims=(16, 8), head_hidden=8)
    tcfg = TrainConfig(max_epochs=3, patience=3, seeds=(0, 1))
    report = multi_seed_report(reg_bundle, mcfg, tcfg)
    stats = report["models"]["shape"]["mae"]
    assert len(stats["per_seed"]) == 2
    assert stats["mean"] == pytest.approx(np.mean(stats["per_seed"]))
    assert stats["std"] == pytest.approx(np.std(stats["per_seed"]))
    with pytest.raises(ValueError, match="2 seeds"):
        multi_seed_report(reg_bundle, mcfg, TrainConfig(seeds=(0,)))


def test_report_csv_layout():
    report = {
        "task": "classification",
        "layer_type": "gcn",
        "models": {
            "shape": {k: {"mean": 0.9, "std": 0.01} for k in
                      ("auc", "tpr_at_fpr_0.15", "tpr_at_fpr_0.20", "fpr_at_tpr_0.70")},
            "image": {k: {"mean": 0.8, "std": 0.02} for k in
                      ("auc", "tpr_at_fpr_0.15", "tpr_at_fpr_0.20", "fpr_at_tpr_0.70")},
            "fusion": {k: {"mean": 0.95, "std": 0.005} for k in
                       ("auc", "tpr_at_fpr_0.15", "tpr_at_fpr_0.20", "fpr_at_tpr_0.70")},
        },
    }
    lines = report_to_csv(report).splitlines()
    assert lines[0] == TABLE2_HEADER
    assert lines[1].startswith("GCNConv,0.900±0.010")
    assert lines[2].startswith("Image,")
    assert lines[3].startswith("Fusion w/ GCNConv,")

    reg = {
        "task": "regression",
        "layer_type": "spline",
        "models": {"shape": {"mae": {"mean": 4.0, "std": 0.1}, "r2": {"mean": 0.8, "std": 0.05}}},
    }
    lines = report_to_csv(reg).splitlines()
    assert lines[0] == TABLE1_HEADER
    assert lines[1] == "SplineConv,4.000±0.100,0.800±0.050"


def test_write_training_log(tmp_path):
    log = [{"epoch": 1, "train_loss": 1.5, "val_loss": 2.0}]
    write_training_log(log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert lines[1] == "1,1.5,2"
