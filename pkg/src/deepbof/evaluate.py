"""Cross-validated codebook-size sweeps with accuracy and timing reports.

The protocol per fold: oversample the training fold for class balance,
build the codebook from the training fold's feature vectors only, train
the MLP on the training fold's histograms, and score the held-out fold.
Nothing from a fold's test set ever reaches its codebook, oversampler, or
classifier; the ``trace`` hook exists so tests can assert exactly that
from the file-access log.

Reports are deterministic under a fixed seed. Wall-clock timings are kept
out of the accuracy report and emitted as a separate table, since they
can never be byte-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bofquant, mlp, pipeline
from .errors import DeepBofError
from .tensorio import DatasetManifest, oversample

DEFAULT_SWEEP = (50, 60, 70, 100)

Trace = Callable[..., None]


@dataclass(frozen=True)
class FoldAssignment:
    """Disjoint index sets covering the dataset; sizes differ by <= 1."""

    folds: tuple[tuple[int, ...], ...]

    def train_test(self, i: int) -> tuple[list[int], list[int]]:
        test = list(self.folds[i])
        train = [idx for j, f in enumerate(self.folds) if j != i for idx in f]
        return train, test


def make_folds(manifest: DatasetManifest, k: int = 10, seed: int = 0) -> FoldAssignment:
    """Stratified k folds: each subject's samples are shuffled (seeded) and
    dealt round-robin with a pointer that continues across subjects, so
    per-subject counts per fold differ by at most one and the global fold
    sizes do too.

    Subjects with fewer than ``k`` samples simply appear in fewer folds;
    that is the documented fallback when full stratification is impossible.
    """
    n = len(manifest.records)
    if n < k:
        raise DeepBofError(f"dataset has {n} samples, fewer than {k} folds")
    if k < 2:
        raise DeepBofError(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    by_subject: dict[str, list[int]] = {s: [] for s in manifest.class_index}
    for i, record in enumerate(manifest.records):
        by_subject[record.subject_id].append(i)

    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for subject in manifest.class_index:
        for idx in rng.permutation(by_subject[subject]):
            folds[cursor % k].append(int(idx))
            cursor += 1
    return FoldAssignment(tuple(tuple(sorted(f)) for f in folds))


@dataclass(frozen=True)
class EvalConfig:
    seed: int
    folds: int = 10
    learning_rate: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    tag: str = "features"
    workers: int = 1
    balance: bool = True


@dataclass(frozen=True)
class SweepEntry:
    """Results of one (feature set, codebook size) configuration."""

    tag: str
    codebook_size: int
    fold_accuracies: tuple[float, ...]
    train_ms: int
    test_ms: int

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))


@dataclass(frozen=True)
class EvalReport:
    sweep: tuple[int, ...]
    entries: tuple[SweepEntry, ...]

    def entry(self, tag: str, codebook_size: int) -> SweepEntry:
        for e in self.entries:
            if e.tag == tag and e.codebook_size == codebook_size:
                return e
        raise KeyError((tag, codebook_size))


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    if not reports:
        raise DeepBofError("no reports to merge")
    sweep = reports[0].sweep
    if any(r.sweep != sweep for r in reports):
        raise DeepBofError("cannot merge reports with different sweeps")
    return EvalReport(sweep, tuple(e for r in reports for e in r.entries))


def measure_ms(fn: Callable[[], object]) -> tuple[object, int]:
    """Run ``fn`` and return its result with monotonic wall time in ms."""
    start = time.perf_counter_ns()
    result = fn()
    return result, round((time.perf_counter_ns() - start) / 1e6)


def measure_times(
    train_stage: Callable[[], object], test_stage: Callable[[], object]
) -> tuple[int, int]:
    """Wall times of a train and a test stage, in integer milliseconds."""
    _, train_ms = measure_ms(train_stage)
    _, test_ms = measure_ms(test_stage)
    return train_ms, test_ms


def _default_classifier(hists, labels, num_classes, cfg: EvalConfig):
    model = mlp.train(
        hists,
        labels,
        mlp.TrainConfig(cfg.seed, cfg.learning_rate, cfg.epochs, cfg.batch_size),
        num_classes,
    )
    return lambda x: mlp.predict_batch(model, x).argmax(axis=1)


def run_sweep(
    manifest: DatasetManifest,
    features_dir: Path | None,
    sweep: Sequence[int] = DEFAULT_SWEEP,
    cfg: EvalConfig = EvalConfig(seed=0),
    load_features: pipeline.FeatureLoader | None = None,
    train_classifier=None,
    trace: Trace | None = None,
) -> EvalReport:
    """Cross-validate every codebook size in ``sweep`` on one feature set.

    Feature files are loaded per fold (never shared across folds) so the
    access log is an honest leakage witness. Timings per codebook size sum
    the per-fold train stage (codebook + quantization + classifier fit)
    and test stage (quantization + scoring); file I/O is outside both.
    """
    default_loader = load_features is None
    loader = pipeline.load_vectors if default_loader else load_features
    classify = _default_classifier if train_classifier is None else train_classifier
    emit = trace if trace is not None else (lambda *a, **k: None)

    all_paths = pipeline.resolve_feature_paths(manifest, manifest.records, features_dir)
    if default_loader:
        pipeline.check_feature_files(all_paths)
    labels = manifest.labels()
    m = manifest.num_classes
    if m < 2:
        raise DeepBofError("evaluation needs at least 2 subjects")

    assignment = make_folds(manifest, cfg.folds, cfg.seed)
    accs: dict[int, list[float]] = {k: [] for k in sweep}
    train_ms: dict[int, int] = {k: 0 for k in sweep}
    test_ms: dict[int, int] = {k: 0 for k in sweep}

    for i in range(cfg.folds):
        train_idx, test_idx = assignment.train_test(i)
        train_manifest = replace(
            manifest, records=tuple(manifest.records[j] for j in train_idx)
        )
        if cfg.balance:
            train_manifest = oversample(train_manifest, cfg.seed)
        train_paths = pipeline.resolve_feature_paths(
            manifest, train_manifest.records, features_dir
        )
        train_labels = np.array(
            [manifest.class_index[r.subject_id] for r in train_manifest.records]
        )
        test_labels = labels[test_idx]

        cache: dict[Path, np.ndarray] = {}

        def _load(path: Path) -> np.ndarray:
            if path not in cache:
                emit("load", path=str(path))
                cache[path] = loader(path)
            return cache[path]

        for k in sweep:
            emit("phase", fold=i, codebook_size=k, name="train")

            def _train_stage():
                train_vecs = [_load(p) for p in train_paths]
                cb = bofquant.init_codebook(
                    pipeline.pool_vectors(train_vecs), k, cfg.seed
                )
                hists = bofquant.quantize_many(train_vecs, cb, cfg.workers)
                return cb, classify(hists, train_labels, m, cfg)

            (cb, predictor), ms = measure_ms(_train_stage)
            train_ms[k] += ms

            emit("phase", fold=i, codebook_size=k, name="test")

            def _test_stage():
                test_vecs = [_load(all_paths[j]) for j in test_idx]
                test_hists = bofquant.quantize_many(test_vecs, cb, cfg.workers)
                return predictor(test_hists)

            predicted, ms = measure_ms(_test_stage)
            test_ms[k] += ms
            accs[k].append(float(np.mean(predicted == test_labels)))

    entries = tuple(
        SweepEntry(cfg.tag, k, tuple(accs[k]), train_ms[k], test_ms[k]) for k in sweep
    )
    return EvalReport(tuple(sweep), entries)


def format_report_table(report: EvalReport) -> str:
    """Accuracy table with the published column layout: one ``Size i``
    column per codebook size, a ``term vectors`` row naming the sizes,
    then one row of mean accuracies per feature set."""
    lines = []
    header = ["Method"] + [f"Size {i + 1}" for i in range(len(report.sweep))]
    lines.append("\t".join(header))
    lines.append("\t".join(["term vectors"] + [str(k) for k in report.sweep]))
    for tag in _tags_in_order(report):
        cells = [tag]
        for k in report.sweep:
            cells.append(f"{report.entry(tag, k).mean_accuracy:.4f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def format_timing_table(report: EvalReport) -> str:
    """Train/test wall-time table, one row per configuration, in ms."""
    lines = ["Method\ttrain (ms)\ttest (ms)"]
    for tag in _tags_in_order(report):
        for k in report.sweep:
            e = report.entry(tag, k)
            lines.append(f"{tag} K={k}\t{e.train_ms}\t{e.test_ms}")
    return "\n".join(lines) + "\n"


def write_jsonl(report: EvalReport, path: str | Path) -> None:
    """Line-delimited record stream: one record per fold plus one summary
    per configuration. Contains no wall-clock values, so reruns under the
    same seed are byte-identical."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in report.entries:
            for fold, acc in enumerate(e.fold_accuracies):
                fh.write(
                    json.dumps(
                        {
                            "record": "fold",
                            "tag": e.tag,
                            "codebook_size": e.codebook_size,
                            "fold": fold,
                            "accuracy": acc,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
        for e in report.entries:
            fh.write(
                json.dumps(
                    {
                        "record": "summary",
                        "tag": e.tag,
                        "codebook_size": e.codebook_size,
                        "mean_accuracy": e.mean_accuracy,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def _tags_in_order(report: EvalReport) -> list[str]:
    tags: list[str] = []
    for e in report.entries:
        if e.tag not in tags:
            tags.append(e.tag)
    return tags
