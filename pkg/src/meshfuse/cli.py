"""Command-line entry point.

Subcommands: synth, preprocess, train, evaluate, predict, report. All
outputs land under an --out directory with a fixed layout; errors are
reported as JSON on stderr with exit code 2 (validation) or 3 (runtime).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .alignment import RegistrationError, umeyama_rigid, apply_transform
from .data import (
    EmbeddingFileError,
    ManifestError,
    load_manifest,
    read_embedding,
)
from .fpfh import FeatureFileError, fpfh
from .layers import compute_pseudo
from .mesh import DegenerateGeometryError, MeshFormatError, load_mesh, mesh_to_graph
from .metrics import MetricError, roc_curve, write_roc_csv
from .models import MlpHead, ModelConfig, MultiGraphEncoder
from .pipeline import preprocess
from .structures import STRUCTURES
from .synth import SynthConfig, generate_synthetic
from .training import (
    METRIC_KEYS,
    TrainConfig,
    TrainingDivergedError,
    compute_metrics,
    extract_shape_embeddings,
    head_scores,
    report_to_csv,
    run_seed,
    target_standardizer,
    write_training_log,
)

VALIDATION_ERRORS = (
    ManifestError,
    MeshFormatError,
    EmbeddingFileError,
    FeatureFileError,
    RegistrationError,
    MetricError,
    DegenerateGeometryError,
    ValueError,
    FileNotFoundError,
)


def _fail(code: int, kind: str, message: str) -> int:
    json.dump({"error": kind, "message": message}, sys.stderr)
    sys.stderr.write("\n")
    return code


def _file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _load_configs(args):
    model_kwargs, train_kwargs = {}, {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
        model_kwargs.update(cfg.get("model", {}))
        train_kwargs.update(cfg.get("train", {}))
    overrides = {
        "task": args.task,
        "layer_type": args.layer_type,
        "seed": None,
    }
    for key, val in overrides.items():
        if val is not None:
            model_kwargs[key] = val
    for key, attr in [
        ("learning_rate", "lr"),
        ("max_epochs", "max_epochs"),
        ("batch_size", "batch_size"),
        ("patience", "patience"),
        ("augment_strength", "augment_strength"),
    ]:
        val = getattr(args, attr, None)
        if val is not None:
            train_kwargs[key] = val
    if getattr(args, "seeds", None):
        train_kwargs["seeds"] = args.seeds
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_subjects=args.subjects,
        seed=args.seed,
        task=args.task or "regression",
        resolution=args.resolution,
        w_shape=args.w_shape,
        w_image=args.w_image,
        shape_noise=args.shape_noise,
        image_noise=args.image_noise,
        embedding_dim=args.embedding_dim,
    )
    manifest = generate_synthetic(cfg, args.out)
    print(
        json.dumps(
            {
                "dataset": str(args.out),
                "subjects": len(manifest.subjects),
                "splits": manifest.split_sizes(),
            }
        )
    )
    return 0


def cmd_preprocess(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = preprocess(manifest, reference_subject=args.reference, out_dir=out)
    meta = {
        "toolkit_version": __version__,
        "manifest_hash": _file_hash(args.manifest),
        "reference_subject": bundle.reference_subject,
        "vertex_counts": {
            s: int(bundle.structures[s].topology.num_nodes) for s in STRUCTURES
        },
        "split_sizes": manifest.split_sizes(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(out / "run_metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(json.dumps({"out": str(out), "subjects": len(manifest.subjects)}))
    return 0


def _save_reference(bundle, out: Path) -> None:
    from .mesh import TriangleMesh, save_off

    ref_dir = out / "reference"
    ref_dir.mkdir(parents=True, exist_ok=True)
    ref_idx = bundle.subject_ids.index(bundle.reference_subject)
    norms = {}
    for s in STRUCTURES:
        sd = bundle.structures[s]
        save_off(TriangleMesh(sd.vertices[ref_idx], sd.faces, s), ref_dir / f"{s}.off")
        norms[s] = sd.normalizer
    with open(out / "pseudo_norm.json", "w") as fh:
        json.dump(norms, fh, indent=1, sort_keys=True)


def cmd_train(args) -> int:
    mcfg, tcfg = _load_configs(args)
    manifest = load_manifest(args.manifest)
    manifest.require_labels(mcfg.task)
    out = Path(args.out)
    for sub in ("checkpoints", "logs", "metrics", "roc"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    bundle = preprocess(manifest, reference_subject=args.reference)
    if bundle.embeddings is not None:
        mcfg.image_dim = int(bundle.embeddings.shape[1])
    _save_reference(bundle, out)

    target_mean, target_std = target_standardizer(bundle, mcfg.task)
    meta = {
        "toolkit_version": __version__,
        "model_config": asdict(mcfg),
        "train_config": asdict(tcfg),
        "target_mean": target_mean,
        "target_std": target_std,
        "manifest_hash": _file_hash(args.manifest),
        "manifest_path": str(Path(args.manifest).resolve()),
        "reference_subject": bundle.reference_subject,
        "seeds": list(tcfg.seeds),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(out / "run_metadata.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)

    for seed in tcfg.seeds:
        result = run_seed(bundle, mcfg, tcfg, seed)
        for model_name, model in result["models"].items():
            ad.save_checkpoint(
                out / "checkpoints" / f"{model_name}_seed{seed}.mfck",
                model.parameters(),
            )
            write_training_log(model.log, out / "logs" / f"{model_name}_seed{seed}.csv")
        with open(out / "metrics" / f"seed{seed}.json", "w") as fh:
            json.dump(
                {"seed": seed, "task": mcfg.task, "metrics": result["metrics"]},
                fh,
                indent=2,
                sort_keys=True,
            )
        y = bundle.targets(mcfg.task)
        test_idx = bundle.split_indices("test")
        if mcfg.task == "classification":
            for model_name, scores in result["scores"].items():
                curve = roc_curve(scores, y[test_idx])
                write_roc_csv(curve, out / "roc" / f"{model_name}_seed{seed}.csv")
    print(json.dumps({"out": str(out), "seeds": list(tcfg.seeds)}))
    return 0


def _rebuild_models(out: Path, bundle, mcfg: ModelConfig, seed: int) -> dict:
    """Models reconstructed from a train run's checkpoints."""
    rng = np.random.default_rng(0)
    models = {}
    ckpt_dir = out / "checkpoints"
    shape_path = ckpt_dir / f"shape_seed{seed}.mfck"
    if not shape_path.exists():
        raise FileNotFoundError(f"missing checkpoint {shape_path}; run train first")
    encoder = MultiGraphEncoder(mcfg, rng)
    shape_head = MlpHead("head.shape", encoder.embedding_dim, mcfg, rng)
    ad.assign_checkpoint(
        encoder.parameters() + shape_head.parameters(), ad.load_checkpoint(shape_path)
    )
    models["shape"] = (encoder, shape_head)
    if bundle.embeddings is not None:
        e = bundle.embeddings.shape[1]
        for name, in_dim in [("image", e), ("fusion", mcfg.fc_dims[1] + e)]:
            path = ckpt_dir / f"{name}_seed{seed}.mfck"
            if path.exists():
                head = MlpHead(f"head.{name}", in_dim, mcfg, rng)
                ad.assign_checkpoint(head.parameters(), ad.load_checkpoint(path))
                models[name] = head
    return models


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    meta_path = out / "run_metadata.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found; run train first")
    with open(meta_path) as fh:
        meta = json.load(fh)
    mcfg = ModelConfig.from_dict(meta["model_config"])
    manifest = load_manifest(args.manifest or meta["manifest_path"])
    bundle = preprocess(manifest, reference_subject=meta["reference_subject"])
    test_idx = bundle.split_indices("test")
    y = bundle.targets(mcfg.task)
    (out / "metrics").mkdir(exist_ok=True)
    (out / "roc").mkdir(exist_ok=True)

    for seed in meta["seeds"]:
        models = _rebuild_models(out, bundle, mcfg, seed)
        encoder, shape_head = models["shape"]
        from .pipeline import batch_inputs

        test_batch = batch_inputs(bundle, test_idx, mcfg.layer_type)
        shape_emb_test = encoder.encode_batch(test_batch).data
        scale = (
            meta.get("target_mean", 0.0),
            meta.get("target_std", 1.0),
        )
        metrics = {}
        scores_by_model = {
            "shape": head_scores(shape_head, shape_emb_test, mcfg.task, scale)
        }
        if "image" in models:
            scores_by_model["image"] = head_scores(
                models["image"], bundle.embeddings[test_idx], mcfg.task, scale
            )
        if "fusion" in models:
            fused = np.concatenate(
                [shape_emb_test, bundle.embeddings[test_idx]], axis=1
            )
            scores_by_model["fusion"] = head_scores(
                models["fusion"], fused, mcfg.task, scale
            )
        for name, scores in scores_by_model.items():
            metrics[name] = compute_metrics(scores, y[test_idx], mcfg.task)
            if mcfg.task == "classification":
                curve = roc_curve(scores, y[test_idx])
                write_roc_csv(curve, out / "roc" / f"{name}_seed{seed}.csv")
        with open(out / "metrics" / f"seed{seed}.json", "w") as fh:
            json.dump(
                {"seed": seed, "task": mcfg.task, "metrics": metrics},
                fh,
                indent=2,
                sort_keys=True,
            )
    print(json.dumps({"out": str(out), "seeds": meta["seeds"]}))
    return 0


def cmd_predict(args) -> int:
    out = Path(args.run)
    with open(out / "run_metadata.json") as fh:
        meta = json.load(fh)
    mcfg = ModelConfig.from_dict(meta["model_config"])
    with open(out / "pseudo_norm.json") as fh:
        norms = json.load(fh)
    mesh_dir = Path(args.mesh_dir)
    rng = np.random.default_rng(0)
    encoder = MultiGraphEncoder(mcfg, rng)
    shape_head = MlpHead("head.shape", encoder.embedding_dim, mcfg, rng)
    seed = meta["seeds"][0] if args.seed is None else args.seed
    ad.assign_checkpoint(
        encoder.parameters() + shape_head.parameters(),
        ad.load_checkpoint(out / "checkpoints" / f"shape_seed{seed}.mfck"),
    )

    from .models import multi_graph_forward, predict as model_predict

    subject = {}
    for s in STRUCTURES:
        mesh = load_mesh(mesh_dir / f"{s}.off", s)
        ref = load_mesh(out / "reference" / f"{s}.off", s)
        t = umeyama_rigid(mesh.vertices, ref.vertices)
        mesh = apply_transform(t, mesh)
        topo = mesh_to_graph(mesh)
        feats = fpfh(mesh, topo)
        pseudo = (
            compute_pseudo(mesh, topo, normalizer=norms[s])
            if mcfg.layer_type == "spline"
            else None
        )
        subject[s] = (feats, topo, pseudo)
    shape_emb = multi_graph_forward(encoder, subject)

    image_emb = None
    head = shape_head
    if args.embedding:
        image_emb = read_embedding(args.embedding)
        fusion_path = out / "checkpoints" / f"fusion_seed{seed}.mfck"
        if fusion_path.exists():
            head = MlpHead(
                "head.fusion", mcfg.fc_dims[1] + image_emb.size, mcfg, rng
            )
            ad.assign_checkpoint(head.parameters(), ad.load_checkpoint(fusion_path))
        else:
            image_emb = None
    out_t = model_predict(
        head, shape_emb=shape_emb, image_emb=image_emb, task=mcfg.task
    )
    values = out_t.data.reshape(-1)
    if mcfg.task == "regression":
        age = float(values[0]) * meta.get("target_std", 1.0) + meta.get(
            "target_mean", 0.0
        )
        print(json.dumps({"task": "regression", "predicted_age": age}))
    else:
        p = np.exp(values - values.max())
        p /= p.sum()
        print(
            json.dumps(
                {
                    "task": "classification",
                    "logits": values.tolist(),
                    "probability_positive": float(p[1]),
                }
            )
        )
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    metrics_dir = out / "metrics"
    files = sorted(metrics_dir.glob("seed*.json"))
    if not files:
        raise FileNotFoundError(f"no per-seed metrics under {metrics_dir}")
    per_seed = []
    for f in files:
        with open(f) as fh:
            per_seed.append(json.load(fh))
    task = per_seed[0]["task"]
    with open(out / "run_metadata.json") as fh:
        meta = json.load(fh)
    report = {
        "task": task,
        "layer_type": meta["model_config"]["layer_type"],
        "seeds": [r["seed"] for r in per_seed],
        "partial": False,
        "operating_point_convention": "step-function (no interpolation)",
        "models": {},
    }
    for model in per_seed[0]["metrics"]:
        stats = {}
        for key in METRIC_KEYS[task]:
            vals = [r["metrics"][model][key] for r in per_seed]
            stats[key] = {
                "per_seed": vals,
                "mean": float(np.mean(vals)),
                "std": float(np.std(vals)),
            }
        report["models"][model] = stats
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    csv_text = report_to_csv(report)
    with open(out / "report.csv", "w") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meshfuse", description="Shape/image fusion modelling toolkit"
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--resolution", type=int, default=2)
    p.add_argument("--w-shape", type=float, default=0.35)
    p.add_argument("--w-image", type=float, default=1.0)
    p.add_argument("--shape-noise", type=float, default=0.03)
    p.add_argument("--image-noise", type=float, default=0.1)
    p.add_argument("--embedding-dim", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="align meshes and cache features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train shape, image, and fusion models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with model/train sections")
    p.add_argument("--reference")
    p.add_argument("--task", choices=["regression", "classification"])
    p.add_argument("--layer-type", dest="layer_type", choices=["gcn", "spline"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--augment-strength", dest="augment_strength", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-split metrics from checkpoints")
    p.add_argument("--out", required=True, help="train run directory")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="single-subject inference")
    p.add_argument("--run", required=True, help="train run directory")
    p.add_argument("--mesh-dir", required=True, help="dir with <structure>.off files")
    p.add_argument("--embedding", help="optional image embedding file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="aggregate per-seed metrics into tables")
    p.add_argument("--out", required=True, help="train/evaluate run directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        return _fail(3, "runtime", str(exc))
    except VALIDATION_ERRORS as exc:
        return _fail(2, type(exc).__name__, str(exc))
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        return _fail(3, "numerical", str(exc))


if __name__ == "__main__":
    sys.exit(main())
