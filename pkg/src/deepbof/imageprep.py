"""Face alignment and the block-grid cropping filter.

Pipeline: rotate the face in-plane so the eye centers sit on a horizontal
line, scale to 240 x 240, then keep only the top five rows of the 10 x 10
grid of 24 x 24 blocks (blocks 1..50), i.e. the upper 240 x 120 region
that stays visible when a mask covers nose and mouth.

Images are uint8 arrays, either (H, W) grayscale or (H, W, 3). Landmark
detection happens upstream; this module only consumes the two eye centers,
either passed directly or parsed from a sidecar file holding one line
``lx ly rx ry``.

All functions are pure and thread-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import DegenerateLandmarksError, DimensionMismatchError, InvalidLandmarksError

ALIGNED_SIZE = 240
GRID = 10
BLOCK = ALIGNED_SIZE // GRID  # 24
CROP_ROWS = ALIGNED_SIZE // 2  # rows 0..119 = blocks 1..50

Point = tuple[float, float]


@dataclass(frozen=True)
class AlignedFace:
    """A 240 x 240 face plus the eye centers mapped into it."""

    image: np.ndarray
    left_eye: Point
    right_eye: Point


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise DimensionMismatchError(f"expected uint8 pixels, got dtype {image.dtype}")
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] in (1, 3):
        return image
    raise DimensionMismatchError(
        f"expected (H, W) or (H, W, 1|3) image, got shape {image.shape}"
    )


def canonicalize_eyes(left: Point, right: Point) -> tuple[Point, Point]:
    """Order the eye pair so the left eye has the smaller x coordinate."""
    if left[0] > right[0]:
        left, right = right, left
    if left == right:
        raise DegenerateLandmarksError("eye centers are coincident")
    if left[0] == right[0]:
        raise DegenerateLandmarksError(
            "eye centers are vertically stacked; rotation is undefined"
        )
    return left, right


def read_eye_sidecar(path: str | Path) -> tuple[Point, Point]:
    """Parse a sidecar file: one line, four space-separated integers."""
    text = Path(path).read_text(encoding="utf-8").strip()
    parts = text.split(" ")
    if len(parts) != 4:
        raise InvalidLandmarksError(f"{path}: expected 'lx ly rx ry', got {text!r}")
    try:
        lx, ly, rx, ry = (int(p) for p in parts)
    except ValueError as exc:
        raise InvalidLandmarksError(f"{path}: non-integer landmark: {exc}") from exc
    return (float(lx), float(ly)), (float(rx), float(ry))


def align_face(image: np.ndarray, left_eye: Point, right_eye: Point) -> AlignedFace:
    """Rotate about the eye midpoint until the eyes are horizontal, then
    scale to 240 x 240.

    Rotation angle is atan2(right.y - left.y, right.x - left.x); pixels
    swept in from outside the canvas are filled by edge replication, and
    both stages interpolate bilinearly. The returned eye coordinates are
    the landmarks pushed through the same affine maps; their y values
    agree to within resampling tolerance (+-1 px).
    """
    image = _check_image(image)
    h, w = image.shape[:2]
    left, right = canonicalize_eyes(left_eye, right_eye)
    for name, (x, y) in (("left", left), ("right", right)):
        if not (0 <= x < w and 0 <= y < h):
            raise InvalidLandmarksError(
                f"{name} eye ({x}, {y}) outside image bounds {w} x {h}"
            )

    theta = math.atan2(right[1] - left[1], right[0] - left[0])
    mid = ((left[0] + right[0]) / 2.0, (left[1] + right[1]) / 2.0)
    rot = cv2.getRotationMatrix2D(mid, math.degrees(theta), 1.0)

    squeeze = image.ndim == 3 and image.shape[2] == 1
    canvas = image[:, :, 0] if squeeze else image
    rotated = cv2.warpAffine(
        canvas, rot, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
    )
    aligned = cv2.resize(
        rotated, (ALIGNED_SIZE, ALIGNED_SIZE), interpolation=cv2.INTER_LINEAR
    )
    if squeeze:
        aligned = aligned[:, :, None]

    def _map(p: Point) -> Point:
        x = rot[0, 0] * p[0] + rot[0, 1] * p[1] + rot[0, 2]
        y = rot[1, 0] * p[0] + rot[1, 1] * p[1] + rot[1, 2]
        # cv2.resize samples at pixel centers: x' = (x + 0.5) * sx - 0.5
        return (
            (x + 0.5) * (ALIGNED_SIZE / w) - 0.5,
            (y + 0.5) * (ALIGNED_SIZE / h) - 0.5,
        )

    return AlignedFace(aligned, _map(left), _map(right))


def _check_aligned(face: np.ndarray) -> np.ndarray:
    face = _check_image(face)
    if face.shape[:2] != (ALIGNED_SIZE, ALIGNED_SIZE):
        raise DimensionMismatchError(
            f"expected a {ALIGNED_SIZE} x {ALIGNED_SIZE} aligned face, got {face.shape[:2]}"
        )
    return face


def partition_blocks(face: np.ndarray) -> np.ndarray:
    """Split an aligned face into its 100 blocks of 24 x 24.

    Blocks are numbered 1..100 row-major from the top-left, so index 0 of
    the returned array is block 1 (rows 0..23, cols 0..23) and index 10 is
    block 11 (rows 24..47, cols 0..23).
    """
    face = _check_aligned(face)
    chans = face.shape[2:]  # () for grayscale
    grid = face.reshape(GRID, BLOCK, GRID, BLOCK, *chans)
    return grid.swapaxes(1, 2).reshape(GRID * GRID, BLOCK, BLOCK, *chans).copy()


def reassemble_blocks(blocks: np.ndarray) -> np.ndarray:
    """Inverse of :func:`partition_blocks`, bit-exact."""
    blocks = np.asarray(blocks)
    if blocks.shape[:3] != (GRID * GRID, BLOCK, BLOCK):
        raise DimensionMismatchError(
            f"expected (100, {BLOCK}, {BLOCK}, ...) blocks, got {blocks.shape}"
        )
    chans = blocks.shape[3:]
    grid = blocks.reshape(GRID, GRID, BLOCK, BLOCK, *chans)
    return grid.swapaxes(1, 2).reshape(ALIGNED_SIZE, ALIGNED_SIZE, *chans).copy()


def crop_unmasked(face: np.ndarray) -> np.ndarray:
    """Keep blocks 1..50: the top half, rows 0..119 across all columns."""
    face = _check_aligned(face)
    return face[:CROP_ROWS].copy()
