"""Feature-map files, dataset manifests, and class-balance oversampling.

The ``.dbf`` tensor format is the boundary between external CNN feature
extraction and the quantization pipeline:

    bytes 0..3    magic ``DBF1``
    bytes 4..15   three little-endian u32: height H, width W, channels C
    bytes 16..    H*W*C little-endian IEEE-754 float32, row-major,
                  channel-last

All values must be finite. Readers reject malformed files with a distinct
error per failure mode: wrong magic -> :class:`BadMagicError`, a zero
dimension or trailing bytes -> :class:`PayloadMismatchError`, a payload
shorter than declared -> :class:`TruncatedFileError`, NaN/inf values ->
:class:`NonFiniteValueError`.

Manifests are tab-separated text, one record per line::

    <path> TAB <subject_id> TAB <masked 0|1> [TAB <split_tag>]

Relative record paths resolve against the manifest's own directory.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ManifestError,
    NonFiniteValueError,
    PayloadMismatchError,
    TruncatedFileError,
)

log = logging.getLogger(__name__)

MAGIC = b"DBF1"
HEADER = struct.Struct("<4sIII")


def write_feature_map(fm: np.ndarray, path: str | Path) -> None:
    """Serialize one H x W x C float32 feature map to ``path``."""
    fm = np.asarray(fm, dtype=np.float32)
    if fm.ndim != 3 or fm.size == 0:
        raise PayloadMismatchError(
            f"feature map must be a non-empty H x W x C array, got shape {fm.shape}"
        )
    if not np.isfinite(fm).all():
        raise NonFiniteValueError("feature map holds NaN or infinity")
    h, w, c = fm.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(fm).tobytes())


def read_feature_map(path: str | Path) -> np.ndarray:
    """Read a ``.dbf`` file back into an H x W x C float32 array.

    Roundtrips are bit-exact: ``read(write(fm))`` equals ``fm``.
    """
    with open(path, "rb") as fh:
        header = fh.read(HEADER.size)
        if len(header) < HEADER.size:
            raise TruncatedFileError(f"{path}: file shorter than the 16-byte header")
        magic, h, w, c = HEADER.unpack(header)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if h == 0 or w == 0 or c == 0:
            raise PayloadMismatchError(f"{path}: zero dimension in header ({h}, {w}, {c})")
        expected = h * w * c * 4
        payload = fh.read(expected + 1)
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise PayloadMismatchError(f"{path}: trailing bytes after declared payload")
    fm = np.frombuffer(payload, dtype="<f4").reshape(h, w, c)
    if not np.isfinite(fm).all():
        raise NonFiniteValueError(f"{path}: payload holds NaN or infinity")
    return fm.copy()


def flatten(fm: np.ndarray) -> np.ndarray:
    """Turn an H x W x C map into the N x C set of local feature vectors.

    N = H*W; vector i holds the channel values at spatial cell i in
    row-major order, so a 14 x 14 x 512 map yields 196 vectors of dim 512.
    """
    fm = np.asarray(fm)
    if fm.ndim != 3 or fm.size == 0:
        raise PayloadMismatchError(
            f"feature map must be a non-empty H x W x C array, got shape {fm.shape}"
        )
    h, w, c = fm.shape
    return np.ascontiguousarray(fm).reshape(h * w, c)


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    subject_id: str
    masked: bool
    split_tag: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of sample records plus the subject -> index map.

    ``class_index`` assigns contiguous integers 0..m-1 in the order
    subjects first appear in the file.
    """

    records: tuple[ManifestRecord, ...]
    class_index: dict[str, int]
    root: Path

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    def labels(self) -> np.ndarray:
        return np.array([self.class_index[r.subject_id] for r in self.records])

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    records: list[ManifestRecord] = []
    class_index: dict[str, int] = {}
    seen_paths: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 3:
                raise ManifestError(
                    f"{path}:{lineno}: expected at least 3 tab-separated fields, got {len(fields)}"
                )
            rec_path, subject, masked_flag = fields[0], fields[1], fields[2]
            split_tag = fields[3] if len(fields) > 3 and fields[3] else None
            if not rec_path:
                raise ManifestError(f"{path}:{lineno}: empty file path")
            if not subject:
                raise ManifestError(f"{path}:{lineno}: empty subject id")
            if masked_flag not in ("0", "1"):
                raise ManifestError(
                    f"{path}:{lineno}: masked flag must be 0 or 1, got {masked_flag!r}"
                )
            if rec_path in seen_paths:
                raise ManifestError(f"{path}:{lineno}: duplicate file path {rec_path!r}")
            seen_paths.add(rec_path)
            if subject not in class_index:
                class_index[subject] = len(class_index)
            records.append(
                ManifestRecord(rec_path, subject, masked_flag == "1", split_tag)
            )
    if not records:
        raise ManifestError(f"{path}: empty manifest (at least 2 subjects required for training)")
    return DatasetManifest(tuple(records), class_index, path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in manifest.records:
            fields = [r.path, r.subject_id, "1" if r.masked else "0"]
            if r.split_tag is not None:
                fields.append(r.split_tag)
            fh.write("\t".join(fields) + "\n")


def oversample(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Balance masked vs unmasked counts per subject by duplicating records.

    For each subject the minority condition is sampled with replacement
    (seeded) until both conditions have equal counts. Existing records are
    never removed or altered; duplicates are appended after the originals
    in subject first-appearance order. A subject missing one condition
    entirely is left as-is with a logged warning.
    """
    rng = np.random.default_rng(seed)
    by_subject: dict[str, list[ManifestRecord]] = {}
    for r in manifest.records:
        by_subject.setdefault(r.subject_id, []).append(r)

    extra: list[ManifestRecord] = []
    for subject in manifest.class_index:
        recs = by_subject.get(subject, [])
        masked = [r for r in recs if r.masked]
        unmasked = [r for r in recs if not r.masked]
        if not masked or not unmasked:
            missing = "masked" if not masked else "unmasked"
            log.warning("subject %s has no %s samples; not oversampled", subject, missing)
            continue
        minority = masked if len(masked) < len(unmasked) else unmasked
        deficit = abs(len(masked) - len(unmasked))
        if deficit == 0:
            continue
        picks = rng.integers(0, len(minority), size=deficit)
        extra.extend(minority[i] for i in picks)

    if not extra:
        return manifest
    return replace(manifest, records=manifest.records + tuple(extra))
