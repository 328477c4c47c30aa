"""Command-line entry point.

Subcommands cover the full pipeline: ``preprocess`` (align + crop face
images), ``codebook`` (k-means init over pooled features), ``train``
(quantize + fit the MLP), ``eval`` (cross-validated codebook-size sweep),
``predict`` (top-1 identity for feature files), and ``show-config``
(print the effective defaults).

Configuration precedence is flags > config file (JSON) > defaults. Seeds
are always explicit; no command ever seeds from the wall clock. Every
command writes only beneath its ``--out`` target and exits nonzero with
the failing stage named on error. ``DEEPBOF_THREADS`` caps worker pools.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from . import bofquant, evaluate, imageprep, mlp, pipeline, tensorio
from .errors import DeepBofError


@dataclass
class PipelineConfig:
    manifest: str | None = None
    features: str | None = None
    out: str | None = None
    codebook_size: int = 50
    sweep: tuple[int, ...] = evaluate.DEFAULT_SWEEP
    seed: int | None = None  # mandatory for seeded commands, never defaulted
    folds: int = 10
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    workers: int = 1
    finetune_epochs: int = 0
    finetune_lr: float = 0.01
    no_balance: bool = False


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise DeepBofError(f"unknown config key {key!r} in {args.config}")
            if key == "sweep":
                value = tuple(int(v) for v in value)
            setattr(cfg, key, value)
    for field in dataclasses.fields(PipelineConfig):
        value = getattr(args, field.name, None)
        if value is not None and value is not False:
            setattr(cfg, field.name, value)
    return cfg


def _require(cfg: PipelineConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) is None:
            raise DeepBofError(f"--{name.replace('_', '-')} is required")


def _seeded_rng_guard(cfg: PipelineConfig) -> int:
    if cfg.seed is None:
        raise DeepBofError("--seed is required (reproducibility is never left to the clock)")
    return int(cfg.seed)


def _load_training_vectors(cfg: PipelineConfig):
    manifest = tensorio.load_manifest(cfg.manifest)
    features_dir = Path(cfg.features) if cfg.features else None
    paths = pipeline.resolve_feature_paths(manifest, manifest.records, features_dir)
    pipeline.check_feature_files(paths)
    return manifest, [pipeline.load_vectors(p) for p in paths]


def cmd_preprocess(cfg: PipelineConfig) -> int:
    _require(cfg, "manifest", "out")
    manifest = tensorio.load_manifest(cfg.manifest)
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_records = []
    for record in manifest.records:
        src = manifest.resolve(record)
        image = cv2.imread(str(src), cv2.IMREAD_UNCHANGED)
        if image is None:
            raise DeepBofError(f"cannot read image {src}")
        left, right = imageprep.read_eye_sidecar(Path(str(src) + ".eyes"))
        aligned = imageprep.align_face(image, left, right)
        crop = imageprep.crop_unmasked(aligned.image)
        name = Path(record.path).stem + ".png"
        if not cv2.imwrite(str(out_dir / name), crop):
            raise DeepBofError(f"cannot write {out_dir / name}")
        out_records.append(dataclasses.replace(record, path=name))
    tensorio.save_manifest(
        tensorio.DatasetManifest(tuple(out_records), manifest.class_index, out_dir),
        out_dir / "manifest.tsv",
    )
    print(f"preprocessed {len(out_records)} images into {out_dir}")
    return 0


def cmd_codebook(cfg: PipelineConfig) -> int:
    _require(cfg, "manifest", "out")
    seed = _seeded_rng_guard(cfg)
    _, vector_sets = _load_training_vectors(cfg)
    codebook = bofquant.init_codebook(
        pipeline.pool_vectors(vector_sets), cfg.codebook_size, seed
    )
    bofquant.save_codebook(codebook, cfg.out)
    print(f"codebook K={codebook.size} dim={codebook.dim} -> {cfg.out}")
    return 0


def cmd_train(cfg: PipelineConfig) -> int:
    _require(cfg, "manifest", "out")
    seed = _seeded_rng_guard(cfg)
    manifest, vector_sets = _load_training_vectors(cfg)
    labels = manifest.labels()
    finetune = (
        pipeline.FinetuneConfig(seed, cfg.finetune_epochs, cfg.finetune_lr)
        if cfg.finetune_epochs > 0
        else None
    )
    codebook, model = pipeline.fit(
        vector_sets,
        labels,
        cfg.codebook_size,
        seed,
        mlp.TrainConfig(seed, cfg.lr, cfg.epochs, cfg.batch_size),
        manifest.num_classes,
        cfg.workers,
        finetune,
    )
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bofquant.save_codebook(codebook, out_dir / "codebook.dbc")
    mlp.save_model(model, out_dir / "model.dbm")
    subjects = sorted(manifest.class_index, key=manifest.class_index.get)
    (out_dir / "labels.txt").write_text("\n".join(subjects) + "\n", encoding="utf-8")
    print(
        f"trained K={codebook.size} m={model.num_classes} "
        f"final_loss={model.final_loss:.6f} -> {out_dir}"
    )
    return 0


def cmd_eval(cfg: PipelineConfig) -> int:
    _require(cfg, "manifest", "out")
    seed = _seeded_rng_guard(cfg)
    manifest = tensorio.load_manifest(cfg.manifest)
    features_dir = Path(cfg.features) if cfg.features else None
    tag = features_dir.name if features_dir else "features"
    report = evaluate.run_sweep(
        manifest,
        features_dir,
        cfg.sweep,
        evaluate.EvalConfig(
            seed=seed,
            folds=cfg.folds,
            learning_rate=cfg.lr,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            tag=tag,
            workers=cfg.workers,
            balance=not cfg.no_balance,
        ),
    )
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.tsv").write_text(
        evaluate.format_report_table(report), encoding="utf-8"
    )
    (out_dir / "timings.tsv").write_text(
        evaluate.format_timing_table(report), encoding="utf-8"
    )
    evaluate.write_jsonl(report, out_dir / "report.jsonl")
    print(evaluate.format_report_table(report), end="")
    return 0


def cmd_predict(cfg: PipelineConfig, files: list[str], codebook_path: str,
                model_path: str, labels_path: str | None) -> int:
    codebook = bofquant.load_codebook(codebook_path)
    model = mlp.load_model(model_path)
    if labels_path is None:
        labels_path = str(Path(model_path).parent / "labels.txt")
    subjects = Path(labels_path).read_text(encoding="utf-8").splitlines()
    if len(subjects) != model.num_classes:
        raise DeepBofError(
            f"{labels_path} lists {len(subjects)} subjects, model has {model.num_classes}"
        )
    for file in files:
        vectors = pipeline.load_vectors(Path(file))
        scores = mlp.predict(model, bofquant.quantize(vectors, codebook))
        top = int(np.argmax(scores))
        print(f"{file}\t{subjects[top]}\t{scores[top]:.6f}")
    return 0


def cmd_show_config(cfg: PipelineConfig) -> int:
    data = dataclasses.asdict(PipelineConfig())
    data["sweep"] = list(data["sweep"])
    print(json.dumps(data, indent=2, sort_keys=True))
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--manifest", help="dataset manifest (tab-separated)")
    p.add_argument("--features", help="directory of .dbf feature files")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--seed", type=int, help="RNG seed (required where randomness is used)")
    p.add_argument("--codebook-size", type=int, dest="codebook_size")
    p.add_argument("--folds", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deepbof",
        description="Masked-face identification via RBF bag-of-features quantization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("preprocess", "align faces and crop the unmasked top half"),
        ("codebook", "build a codebook from pooled feature vectors"),
        ("train", "quantize features and train the MLP classifier"),
        ("eval", "cross-validated codebook-size sweep"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "train":
            p.add_argument("--finetune-epochs", type=int, dest="finetune_epochs")
            p.add_argument("--finetune-lr", type=float, dest="finetune_lr")
        if name == "eval":
            p.add_argument(
                "--sweep",
                type=lambda s: tuple(int(v) for v in s.split(",")),
                help="comma-separated codebook sizes (default 50,60,70,100)",
            )
            p.add_argument("--no-balance", action="store_true", dest="no_balance",
                           help="skip oversampling inside training folds")

    p = sub.add_parser("predict", help="print top-1 identity per feature file")
    p.add_argument("--config")
    p.add_argument("--codebook", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--labels", help="subject list (default: labels.txt next to the model)")
    p.add_argument("files", nargs="+")

    sub.add_parser("show-config", help="print default configuration as JSON")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "codebook":
            return cmd_codebook(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.files, args.codebook, args.model, args.labels)
        if args.command == "show-config":
            return cmd_show_config(cfg)
        raise DeepBofError(f"unknown command {args.command!r}")
    except DeepBofError as exc:
        print(f"deepbof {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"deepbof {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
