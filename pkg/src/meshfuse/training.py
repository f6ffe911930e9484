"""Training loops, Adam, losses, augmentation, and multi-seed evaluation.

Shape models train end-to-end from recomputed FPFH features; image and
fusion models train small heads over fixed embeddings. Splits come from the
manifest and never change with the seed; the seed drives initialization,
shuffling, and augmentation only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .metrics import classification_metrics, regression_metrics, roc_curve
from .models import MlpHead, ModelConfig, MultiGraphEncoder
from .pipeline import DatasetBundle, batch_inputs
from .structures import STRUCTURES


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log or []


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int | None = None  # None = full batch
    max_epochs: int = 500
    patience: int = 20
    seeds: tuple = (0, 1, 2)
    augment_strength: float = 0.1  # mm, training split only

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        self.seeds = tuple(self.seeds)
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.augment_strength < 0:
            raise ValueError("augment_strength must be >= 0")


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, lr: float) -> None:
    state.t += 1
    t = state.t
    for p in params:
        g = ad.grad_or_zero(p)
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"NaN/Inf gradient for parameter {p.name}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m = state.m[p.name] = state.beta1 * state.m[p.name] + (1 - state.beta1) * g
        v = state.v[p.name] = state.beta2 * state.v[p.name] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    flat = ad.reshape(pred, (-1,))
    t = Tensor(np.asarray(target, dtype=flat.dtype).reshape(-1))
    diff = ad.sub(flat, t)
    return ad.mean(ad.mul(diff, diff), axis=0)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"class index out of range for {c} classes")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = ad.mul(ad.log_softmax(logits), Tensor(onehot))
    return ad.scale(ad.mean(ad.sum_axis(picked, axis=1), axis=0), -1.0)


def losses(pred: Tensor, target, task: str) -> Tensor:
    if task == "regression":
        return mse_loss(pred, target)
    return cross_entropy_loss(pred, target)


# instrumentation: how many augmentation draws each split received
AUGMENT_COUNTER = {"train": 0, "val": 0, "test": 0}


def augment_translate(shape, strength: float, rng: np.random.Generator, split: str = "train") -> np.ndarray:
    """Uniform random per-vertex displacement, each component in [-s, +s]."""
    AUGMENT_COUNTER[split] += 1
    if strength == 0:
        return np.zeros(shape)
    return rng.uniform(-strength, strength, size=shape)


def target_standardizer(bundle: DatasetBundle, task: str) -> tuple[float, float]:
    """(mean, std) of the training targets; identity for classification.

    Regression trains in standardized target space so the Adam step size is
    well matched to the output scale; predictions are mapped back to years.
    """
    if task != "regression":
        return 0.0, 1.0
    tr = bundle.targets("regression")[bundle.split_indices("train")]
    mu = float(tr.mean())
    sigma = float(tr.std())
    return mu, sigma if sigma > 0 else 1.0


def _snapshot(params):
    return {p.name: p.data.copy() for p in params}


def _restore(params, snap):
    for p in params:
        p.data = snap[p.name]


def _fit(step_fn, val_fn, params, tcfg: TrainConfig):
    """Generic loop: step_fn(epoch) -> train loss, val_fn() -> val loss.

    Keeps the checkpoint with the best validation loss; early-stops after
    `patience` epochs without improvement. Returns (log rows, best epoch).
    """
    state = AdamState()
    best_val = np.inf
    best_snap = _snapshot(params)
    best_epoch = 0
    since_best = 0
    log = []
    for epoch in range(1, tcfg.max_epochs + 1):
        train_loss = step_fn(state, epoch)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(
                f"training loss diverged at epoch {epoch}", log
            )
        val_loss = val_fn()
        log.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best_snap = _snapshot(params)
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= tcfg.patience:
                break
    _restore(params, best_snap)
    return log, best_epoch


@dataclass
class ShapeModel:
    encoder: MultiGraphEncoder
    head: MlpHead
    log: list
    best_epoch: int

    def parameters(self):
        return self.encoder.parameters() + self.head.parameters()


def train_standalone_shape(
    bundle: DatasetBundle, mcfg: ModelConfig, tcfg: TrainConfig, seed: int
) -> ShapeModel:
    """End-to-end training of the multi-graph encoder plus its own head."""
    bundle_check_labels(bundle, mcfg.task)
    init_rng = np.random.default_rng([seed, 0])
    aug_rng = np.random.default_rng([seed, 1])
    shuffle_rng = np.random.default_rng([seed, 2])

    encoder = MultiGraphEncoder(mcfg, init_rng)
    head = MlpHead("head.shape", encoder.embedding_dim, mcfg, init_rng)
    params = encoder.parameters() + head.parameters()

    train_idx = bundle.split_indices("train")
    val_idx = bundle.split_indices("val")
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("training requires non-empty train and val splits")
    y = bundle.targets(mcfg.task)
    if mcfg.task == "regression":
        mu, sigma = target_standardizer(bundle, mcfg.task)
        y = (y - mu) / sigma

    val_batch = batch_inputs(bundle, val_idx, mcfg.layer_type)
    static_train = None
    if tcfg.augment_strength == 0:
        static_train = batch_inputs(bundle, train_idx, mcfg.layer_type)

    def run(batch, idx):
        emb = encoder.encode_batch(batch)
        out = head.forward(emb)
        return losses(out, y[idx], mcfg.task)

    def step_fn(state, epoch):
        if tcfg.batch_size is None:
            chunks = [train_idx]
        else:
            order = shuffle_rng.permutation(train_idx)
            chunks = [
                order[i : i + tcfg.batch_size]
                for i in range(0, order.size, tcfg.batch_size)
            ]
        total, count = 0.0, 0
        for chunk in chunks:
            if tcfg.augment_strength > 0:
                n_by_s = {
                    s: bundle.structures[s].topology.num_nodes for s in STRUCTURES
                }
                perturb = {
                    s: augment_translate(
                        (chunk.size, n_by_s[s], 3), tcfg.augment_strength, aug_rng
                    )
                    for s in STRUCTURES
                }
                batch = batch_inputs(bundle, chunk, mcfg.layer_type, perturb)
            elif static_train is not None and chunk is train_idx:
                batch = static_train
            else:
                batch = batch_inputs(bundle, chunk, mcfg.layer_type)
            for p in params:
                p.zero_grad()
            loss = run(batch, chunk)
            ad.backward(loss)
            adam_step(state, params, tcfg.learning_rate)
            total += float(loss.data) * chunk.size
            count += chunk.size
        return total / count

    def val_fn():
        return float(run(val_batch, val_idx).data)

    log, best_epoch = _fit(step_fn, val_fn, params, tcfg)
    return ShapeModel(encoder, head, log, best_epoch)


def bundle_check_labels(bundle: DatasetBundle, task: str) -> None:
    if task == "regression" and np.isnan(bundle.ages).any():
        raise ValueError("regression task requires age labels for all subjects")
    if task == "classification" and (bundle.diagnoses < 0).any():
        raise ValueError("classification task requires diagnosis labels")


def extract_shape_embeddings(
    encoder: MultiGraphEncoder, bundle: DatasetBundle, layer_type: str
) -> np.ndarray:
    """Frozen subject embeddings (num_subjects, f2), no augmentation."""
    idx = np.arange(bundle.num_subjects)
    batch = batch_inputs(bundle, idx, layer_type)
    return encoder.encode_batch(batch).data.copy()


@dataclass
class HeadModel:
    head: MlpHead
    log: list
    best_epoch: int

    def parameters(self):
        return self.head.parameters()


def train_head_model(
    features: np.ndarray,
    bundle: DatasetBundle,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    seed: int,
    name: str = "head.embed",
) -> HeadModel:
    """Train a head over fixed per-subject feature vectors (image or fusion)."""
    bundle_check_labels(bundle, mcfg.task)
    rng = np.random.default_rng([seed, 3])
    shuffle_rng = np.random.default_rng([seed, 4])
    X = np.asarray(features, dtype=np.float32)
    head = MlpHead(name, X.shape[1], mcfg, rng)
    params = head.parameters()
    train_idx = bundle.split_indices("train")
    val_idx = bundle.split_indices("val")
    y = bundle.targets(mcfg.task)
    if mcfg.task == "regression":
        mu, sigma = target_standardizer(bundle, mcfg.task)
        y = (y - mu) / sigma

    def run(idx):
        out = head.forward(Tensor(X[idx]))
        return losses(out, y[idx], mcfg.task)

    def step_fn(state, epoch):
        if tcfg.batch_size is None:
            chunks = [train_idx]
        else:
            order = shuffle_rng.permutation(train_idx)
            chunks = [
                order[i : i + tcfg.batch_size]
                for i in range(0, order.size, tcfg.batch_size)
            ]
        total, count = 0.0, 0
        for chunk in chunks:
            for p in params:
                p.zero_grad()
            loss = run(chunk)
            ad.backward(loss)
            adam_step(state, params, tcfg.learning_rate)
            total += float(loss.data) * chunk.size
            count += chunk.size
        return total / count

    log, best_epoch = _fit(step_fn, lambda: float(run(val_idx).data), params, tcfg)
    return HeadModel(head, log, best_epoch)


def head_scores(head: MlpHead, X: np.ndarray, task: str,
                target_scale: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Test-time scores: predicted value (regression) or P(class 1)."""
    out = head.forward(Tensor(np.asarray(X, dtype=np.float32))).data
    if task == "regression":
        mu, sigma = target_scale
        return out[:, 0].astype(np.float64) * sigma + mu
    shifted = out - out.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    return p[:, 1].astype(np.float64)


def shape_scores(model: ShapeModel, bundle: DatasetBundle, mcfg: ModelConfig,
                 idx: np.ndarray) -> np.ndarray:
    batch = batch_inputs(bundle, idx, mcfg.layer_type)
    emb = model.encoder.encode_batch(batch).data
    scale = target_standardizer(bundle, mcfg.task)
    return head_scores(model.head, emb, mcfg.task, scale)


def compute_metrics(scores: np.ndarray, targets: np.ndarray, task: str) -> dict:
    if task == "regression":
        return regression_metrics(scores, targets)
    return classification_metrics(scores, targets)


METRIC_KEYS = {
    "regression": ("mae", "r2"),
    "classification": ("auc", "tpr_at_fpr_0.15", "tpr_at_fpr_0.20", "fpr_at_tpr_0.70"),
}


def run_seed(bundle: DatasetBundle, mcfg: ModelConfig, tcfg: TrainConfig, seed: int) -> dict:
    """Train all model variants for one seed; returns test metrics and models.

    Variants: shape (standalone GNN), image (head over supplied embeddings,
    when present), fusion (head over frozen shape + image embeddings).
    """
    test_idx = bundle.split_indices("test")
    y = bundle.targets(mcfg.task)
    out: dict = {"seed": seed, "metrics": {}, "scores": {}, "models": {}}

    shape_model = train_standalone_shape(bundle, mcfg, tcfg, seed)
    s_scores = shape_scores(shape_model, bundle, mcfg, test_idx)
    out["metrics"]["shape"] = compute_metrics(s_scores, y[test_idx], mcfg.task)
    out["scores"]["shape"] = s_scores
    out["models"]["shape"] = shape_model

    if bundle.embeddings is not None:
        img = bundle.embeddings
        scale = target_standardizer(bundle, mcfg.task)
        image_model = train_head_model(img, bundle, mcfg, tcfg, seed, "head.image")
        i_scores = head_scores(image_model.head, img[test_idx], mcfg.task, scale)
        out["metrics"]["image"] = compute_metrics(i_scores, y[test_idx], mcfg.task)
        out["scores"]["image"] = i_scores
        out["models"]["image"] = image_model

        shape_emb = extract_shape_embeddings(shape_model.encoder, bundle, mcfg.layer_type)
        fused = np.concatenate([shape_emb, img], axis=1)
        fusion_model = train_head_model(fused, bundle, mcfg, tcfg, seed, "head.fusion")
        f_scores = head_scores(fusion_model.head, fused[test_idx], mcfg.task, scale)
        out["metrics"]["fusion"] = compute_metrics(f_scores, y[test_idx], mcfg.task)
        out["scores"]["fusion"] = f_scores
        out["models"]["fusion"] = fusion_model
    return out


def multi_seed_report(bundle: DatasetBundle, mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    """Mean +/- population std of every metric over the configured seeds."""
    if len(tcfg.seeds) < 2:
        raise ValueError("multi-seed report requires at least 2 seeds")
    per_seed = []
    partial = False
    for seed in tcfg.seeds:
        try:
            per_seed.append(run_seed(bundle, mcfg, tcfg, seed))
        except TrainingDivergedError:
            partial = True
    report = {
        "task": mcfg.task,
        "layer_type": mcfg.layer_type,
        "seeds": list(tcfg.seeds),
        "partial": partial,
        "operating_point_convention": "step-function (no interpolation)",
        "models": {},
    }
    if not per_seed:
        return report
    for model in per_seed[0]["metrics"]:
        stats = {}
        for key in METRIC_KEYS[mcfg.task]:
            vals = [r["metrics"][model][key] for r in per_seed]
            stats[key] = {
                "per_seed": vals,
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)),  # population std over seeds
            }
        report["models"][model] = stats
    return report


TABLE1_HEADER = "Model,MAE,R2 score"
TABLE2_HEADER = "Model,AUC,TPR@FPR=0.15,TPR@FPR=0.20,FPR@TPR=0.70"

_DISPLAY = {"gcn": "GCNConv", "spline": "SplineConv"}


def _fmt(stat: dict) -> str:
    return f"{stat['mean']:.3f}±{stat['std']:.3f}"


def report_to_csv(report: dict) -> str:
    """Report CSV in the layout of the result tables (mean +/- std cells)."""
    conv = _DISPLAY[report["layer_type"]]
    names = {"shape": conv, "image": "Image", "fusion": f"Fusion w/ {conv}"}
    if report["task"] == "regression":
        lines = [TABLE1_HEADER]
        keys = METRIC_KEYS["regression"]
    else:
        lines = [TABLE2_HEADER]
        keys = METRIC_KEYS["classification"]
    for model, stats in report["models"].items():
        cells = [names.get(model, model)] + [_fmt(stats[k]) for k in keys]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_training_log(log: list, path) -> None:
    with open(str(path), "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for row in log:
            fh.write(f"{row['epoch']},{row['train_loss']:.10g},{row['val_loss']:.10g}\n")
