"""Batch feature-map export into the ``.dbf`` interchange format.

The writer here is an independent implementation of the format contract
(magic ``DBF1``, little-endian u32 H, W, C, then H*W*C little-endian
float32, row-major channel-last); the consumer side validates files with
its own reader, so the two implementations cross-check each other.

Input crops can be any size; they are edge-padded to a square before the
backbone's standard 224 resize + ImageNet normalization, so the wide
240 x 120 upper-face crops keep their aspect.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import cv2
import numpy as np
import torch

from .models import ExtractorSpec, build_backbone

MAGIC = b"DBF1"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
INPUT_SIZE = 224
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


class ShapeMismatchError(RuntimeError):
    """The tapped layer produced a different shape than the spec declares."""


def write_dbf(fm: np.ndarray, path: Path) -> None:
    fm = np.ascontiguousarray(fm, dtype="<f4")
    if fm.ndim != 3:
        raise ValueError(f"feature map must be H x W x C, got shape {fm.shape}")
    if not np.isfinite(fm).all():
        raise ValueError("feature map holds NaN or infinity")
    h, w, c = fm.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<III", h, w, c))
        fh.write(fm.tobytes())


def preprocess(image: np.ndarray) -> np.ndarray:
    """uint8 image (any aspect, gray or BGR) -> normalized CHW float32."""
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.shape[2] != 3:
        raise ValueError(f"expected 1- or 3-channel image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h != w:
        if h < w:
            top = (w - h) // 2
            pads = ((top, w - h - top), (0, 0), (0, 0))
        else:
            left = (h - w) // 2
            pads = ((0, 0), (left, h - w - left), (0, 0))
        image = np.pad(image, pads, mode="edge")
    image = cv2.resize(image, (INPUT_SIZE, INPUT_SIZE), interpolation=cv2.INTER_LINEAR)
    rgb = image[:, :, ::-1].astype(np.float32) / 255.0
    rgb = (rgb - IMAGENET_MEAN) / IMAGENET_STD
    return rgb.transpose(2, 0, 1)


def list_inputs(source: Path) -> list[Path]:
    """Image paths from a directory (sorted) or a tab-separated manifest
    whose first column holds image paths (resolved against the manifest)."""
    source = Path(source)
    if source.is_dir():
        return sorted(
            p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
        )
    images = []
    for line in source.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = Path(line.split("\t")[0])
        images.append(rec if rec.is_absolute() else source.parent / rec)
    return images


def extract(
    images: Iterable[Path],
    spec: ExtractorSpec,
    out_dir: Path,
    weights: str = "pretrained",
    seed: int = 0,
    batch_size: int = 8,
) -> int:
    """Export one ``.dbf`` per image, named after its stem; returns the
    file count. Inference only, deterministic for fixed weights."""
    images = list(images)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone = build_backbone(spec, weights=weights, seed=seed)

    written = 0
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            tensors = []
            for path in chunk:
                image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
                if image is None:
                    raise FileNotFoundError(f"cannot read image {path}")
                tensors.append(preprocess(image))
            batch = torch.from_numpy(np.stack(tensors))
            maps = backbone(batch).numpy()  # (B, C, h, w)
            for path, fm in zip(chunk, maps):
                hwc = np.ascontiguousarray(fm.transpose(1, 2, 0))
                if hwc.shape != spec.expected_shape:
                    raise ShapeMismatchError(
                        f"{spec.tag} produced {hwc.shape}, expected "
                        f"{spec.expected_shape}; wrong layer tapped?"
                    )
                write_dbf(hwc, out_dir / f"{path.stem}.dbf")
                written += 1
    return written
