"""Command-line entry point for the embedding exporter."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import ExportError, ExportJob, export_embeddings
from .images import ImageLoadError


def _collect_images(args) -> dict[str, str]:
    images: dict[str, str] = {}
    if args.input_csv:
        import csv

        with open(args.input_csv, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["subject_id", "image_path"]:
                raise ValueError(
                    "input CSV must have header subject_id,image_path,"
                    f" got {reader.fieldnames}"
                )
            root = Path(args.input_csv).parent
            for row in reader:
                images[row["subject_id"]] = str(root / row["image_path"])
    for item in args.images or []:
        p = Path(item)
        images[p.stem] = str(p)
    if not images:
        raise ValueError("no input images; pass files or --input-csv")
    return images


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-exporter",
        description="Export 512-dim ResNet-18 embeddings for brain images",
    )
    parser.add_argument("images", nargs="*", help="image or .npy volume files")
    parser.add_argument("--input-csv", help="CSV with subject_id,image_path rows")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--weights",
        help="torch state-dict file for ResNet-18; without it a fixed-seed"
        " random initialization is used (deterministic, test-grade only)",
    )
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--slice-mode", choices=["middle", "average"], default="middle")
    parser.add_argument("--slab", type=int, default=5)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = ExportJob(
            images=_collect_images(args),
            out_dir=args.out,
            weights_path=args.weights,
            device=args.device,
            slice_mode=args.slice_mode,
            slab=args.slab,
            batch_size=args.batch_size,
            seed=args.seed,
        )
        result = export_embeddings(job)
    except (ValueError, ImageLoadError, FileNotFoundError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except ExportError as exc:
        json.dump({"error": "ExportError", "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 3
    print(
        json.dumps(
            {
                "out": args.out,
                "exported": len(result.embedding_paths),
                "failures": result.failures,
            }
        )
    )
    return 0 if result.ok else 1


if __name__ == "__main__":
    sys.exit(main())
