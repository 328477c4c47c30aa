"""Glue between feature files, the quantizer, and the classifier.

Shared by the CLI and the evaluation harness: resolving manifest records
to ``.dbf`` feature files, batch quantization, and the optional joint
fine-tuning loop that backpropagates the classifier loss into the RBF
codebook (off by default; the standard pipeline keeps the k-means
codebook frozen).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bofquant, mlp, tensorio
from .errors import DeepBofError
from .tensorio import DatasetManifest, ManifestRecord

FeatureLoader = Callable[[Path], np.ndarray]


def load_vectors(path: Path) -> np.ndarray:
    """Default feature loader: read a ``.dbf`` map and flatten it."""
    return tensorio.flatten(tensorio.read_feature_map(path))


def resolve_feature_paths(
    manifest: DatasetManifest,
    records: Sequence[ManifestRecord],
    features_dir: Path | None,
) -> list[Path]:
    """Map records to their feature files.

    With ``features_dir`` set, each record maps to
    ``<features_dir>/<stem>.dbf`` where the stem comes from the record's
    path; record stems must then be unique. Without it, record paths are
    used directly (resolved against the manifest directory).
    """
    paths: list[Path] = []
    if features_dir is None:
        paths = [manifest.resolve(r) for r in records]
    else:
        features_dir = Path(features_dir)
        seen: dict[str, str] = {}
        for r in records:
            stem = Path(r.path).stem
            if seen.setdefault(stem, r.path) != r.path:
                raise DeepBofError(
                    f"records {seen[stem]!r} and {r.path!r} both map to stem {stem!r}"
                )
            paths.append(features_dir / f"{stem}.dbf")
    return paths


def check_feature_files(paths: Sequence[Path]) -> None:
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise DeepBofError("missing feature files:\n" + "\n".join(missing))


def pool_vectors(vector_sets: Sequence[np.ndarray]) -> np.ndarray:
    if not vector_sets:
        raise DeepBofError("no feature vectors to pool")
    return np.concatenate([np.asarray(v, dtype=np.float64) for v in vector_sets])


@dataclass
class FinetuneConfig:
    """Joint codebook + classifier fine-tuning schedule (per-sample SGD)."""

    seed: int
    epochs: int = 10
    learning_rate: float = 0.01


def joint_finetune(
    vector_sets: Sequence[np.ndarray],
    labels: np.ndarray,
    codebook: bofquant.Codebook,
    model: mlp.MlpModel,
    cfg: FinetuneConfig,
) -> tuple[bofquant.Codebook, mlp.MlpModel, np.ndarray]:
    """Train quantizer and classifier simultaneously.

    Per sample: quantize, run the classifier, backpropagate the
    cross-entropy through the histogram into centers and widths, and step
    everything by ``learning_rate``. Widths are clamped to stay positive.
    Returns updated copies plus the mean per-sample loss per epoch.
    """
    centers = codebook.centers.copy()
    widths = codebook.widths.copy()
    model = mlp.MlpModel(
        model.w1.copy(), model.b1.copy(), model.w2.copy(), model.b2.copy()
    )
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    history = []
    for _ in range(cfg.epochs):
        losses = []
        for i in rng.permutation(len(vector_sets)):
            cb = bofquant.Codebook(centers, widths)
            hist = bofquant.quantize(vector_sets[i], cb)
            loss, grads = mlp.loss_and_gradients(model, hist[None, :], labels[i : i + 1])
            losses.append(loss)
            bof = bofquant.quantize_backward(vector_sets[i], cb, grads["x"][0])
            model.w1 -= lr * grads["w1"]
            model.b1 -= lr * grads["b1"]
            model.w2 -= lr * grads["w2"]
            model.b2 -= lr * grads["b2"]
            centers -= lr * bof.d_centers
            widths = np.maximum(widths - lr * bof.d_widths, 1e-6)
        history.append(float(np.mean(losses)))
    final = bofquant.Codebook(centers, widths)
    model.loss_history = np.asarray(history)
    return final, model, np.asarray(history)


def fit(
    vector_sets: Sequence[np.ndarray],
    labels: np.ndarray,
    codebook_size: int,
    seed: int,
    train_cfg: mlp.TrainConfig,
    num_classes: int | None = None,
    workers: int = 1,
    finetune: FinetuneConfig | None = None,
) -> tuple[bofquant.Codebook, mlp.MlpModel]:
    """Codebook from pooled training vectors, then an MLP on the histograms."""
    codebook = bofquant.init_codebook(pool_vectors(vector_sets), codebook_size, seed)
    hists = bofquant.quantize_many(list(vector_sets), codebook, workers)
    model = mlp.train(hists, labels, train_cfg, num_classes)
    if finetune is not None:
        codebook, model, _ = joint_finetune(vector_sets, labels, codebook, model, finetune)
    return codebook, model
