"""Trainable RBF bag-of-features quantization.

A codebook of K radial-basis centers turns the N x C local feature
vectors of one image into a K-bin histogram:

    raw similarity   r_ij = exp(-||x_i - c_j|| / sigma_j)
    soft assignment  p_ij = r_ij / sum_j r_ij
    histogram        h_j  = (1/N) sum_i p_ij

Because every p_i sums to one, h is L1-normalized for any N, so images
with differently sized feature maps land in the same histogram space.
The whole map is differentiable; :func:`quantize_backward` returns exact
gradients with respect to centers, widths, and inputs so the codebook can
be trained jointly with the classifier on top.

Codebooks are initialized with seeded Lloyd k-means over the pooled
training vectors (farthest-point start, ties to the lowest index), and
all widths start at the mean pairwise distance between centers.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DeepBofError,
    DimensionMismatchError,
    NonFiniteValueError,
    PayloadMismatchError,
    TruncatedFileError,
)

CODEBOOK_MAGIC = b"DBC1"
_CB_HEADER = struct.Struct("<4sII")


@dataclass
class Codebook:
    """K learnable RBF centers with one positive width each."""

    centers: np.ndarray  # (K, C) float64
    widths: np.ndarray  # (K,) float64

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.widths = np.asarray(self.widths, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[0] < 1:
            raise DimensionMismatchError(
                f"centers must be (K, C) with K >= 1, got {self.centers.shape}"
            )
        if self.widths.shape != (self.centers.shape[0],):
            raise DimensionMismatchError(
                f"widths shape {self.widths.shape} does not match K={self.centers.shape[0]}"
            )
        if not (np.isfinite(self.centers).all() and np.isfinite(self.widths).all()):
            raise NonFiniteValueError("codebook holds NaN or infinity")
        if not (self.widths > 0).all():
            raise DeepBofError("all codebook widths must be positive")

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass
class BofGradients:
    """Gradients of a scalar loss through :func:`quantize`."""

    d_centers: np.ndarray  # (K, C)
    d_widths: np.ndarray  # (K,)
    d_inputs: np.ndarray  # (N, C)


def _sq_distances(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (N, K), via the expanded product
    ||x||^2 + ||c||^2 - 2 x.c; clipped at zero against cancellation."""
    d2 = (
        (x * x).sum(axis=1)[:, None]
        + (centers * centers).sum(axis=1)[None, :]
        - 2.0 * (x @ centers.T)
    )
    return np.maximum(d2, 0.0, out=d2)


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded deterministic start: one random point, then repeatedly the
    point farthest from its nearest chosen center (ties -> lowest index)."""
    first = int(rng.integers(0, x.shape[0]))
    chosen = [first]
    min_d2 = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(min_d2))
        chosen.append(nxt)
        min_d2 = np.minimum(min_d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans(
    vectors: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lloyd's algorithm with a fixed, reproducible protocol.

    Protocol (mirrored by the brute-force oracle in the test suite):
    farthest-point initialization seeded by ``numpy.random.default_rng(seed)``;
    each iteration assigns every vector to its nearest center (ties to the
    lowest index), then moves each center to the mean of its members; a
    center left with no members is re-seeded to the not-yet-taken point
    farthest from its assigned center, in center-index order. Stops when
    assignments are stable, when the relative objective improvement falls
    below ``tol``, or after ``max_iter`` iterations.

    Returns ``(centers, assignments, objective_history)`` where the history
    holds the sum of squared distances at each assignment step; it is
    non-increasing.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionMismatchError(f"vectors must be (N, C), got {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise DeepBofError(f"k must be >= 1, got {k}")
    if k > n:
        raise DeepBofError(f"k={k} exceeds the {n} pooled vectors available")

    rng = np.random.default_rng(seed)
    centers = _farthest_point_init(x, k, rng)
    prev_assign: np.ndarray | None = None
    history: list[float] = []
    assign = np.zeros(n, dtype=np.intp)
    for _ in range(max_iter):
        d2 = _sq_distances(x, centers)
        assign = np.argmin(d2, axis=1)
        own_d2 = d2[np.arange(n), assign]
        history.append(float(own_d2.sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        if len(history) >= 2 and history[-2] - history[-1] <= tol * max(history[-2], 1e-12):
            break
        new_centers = centers.copy()
        empty = []
        for j in range(k):
            members = x[assign == j]
            if members.shape[0]:
                new_centers[j] = members.mean(axis=0)
            else:
                empty.append(j)
        if empty:
            order = np.argsort(-own_d2, kind="stable")
            taken = 0
            for j in empty:
                new_centers[j] = x[order[taken]]
                taken += 1
        centers = new_centers
        prev_assign = assign
    return centers, assign, np.asarray(history)


def init_codebook(vectors: np.ndarray, k: int, seed: int) -> Codebook:
    """Build a codebook from pooled training vectors via seeded k-means.

    Every width starts at the mean pairwise distance between the final
    centers (a single global value); when that is undefined or zero
    (K = 1 or all centers coincident) it falls back to 1.0.
    """
    centers, _, _ = kmeans(vectors, k, seed)
    if k >= 2:
        d2 = _sq_distances(centers, centers)
        iu = np.triu_indices(k, k=1)
        sigma = float(np.sqrt(d2[iu]).mean())
    else:
        sigma = 0.0
    if sigma <= 0.0:
        sigma = 1.0
    return Codebook(centers, np.full(k, sigma))


def raw_similarities(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Unnormalized RBF responses exp(-||x_i - c_j|| / sigma_j), (N, K)."""
    x = _check_vectors(x, codebook)
    d = np.sqrt(_sq_distances(x, codebook.centers))
    return np.exp(-d / codebook.widths)


def memberships(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Per-vector soft assignments, each row summing to 1.

    A row whose raw responses all underflow to zero (inputs enormously far
    from every center) falls back to the uniform assignment 1/K.
    """
    raw = raw_similarities(x, codebook)
    totals = raw.sum(axis=1, keepdims=True)
    dead = totals[:, 0] == 0.0
    if dead.any():
        raw[dead] = 1.0
        totals[dead] = codebook.size
    return raw / totals


def rbf_membership(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Soft assignment of a single C-dim vector, length K, summing to 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatchError(f"expected a single vector, got shape {x.shape}")
    return memberships(x[None, :], codebook)[0]


def quantize(vectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Histogram of one image: the mean soft assignment over its vectors.

    Each bin is accumulated in sorted-value order, so any permutation of
    the input vectors produces a bit-identical histogram.
    """
    p = memberships(vectors, codebook)
    return np.sort(p, axis=0).sum(axis=0) / p.shape[0]


def quantize_many(
    vector_sets: list[np.ndarray], codebook: Codebook, workers: int = 1
) -> np.ndarray:
    """Quantize a batch of images into an (n, K) histogram matrix.

    Results are reduced in input order regardless of worker scheduling.
    ``DEEPBOF_THREADS`` caps the worker count.
    """
    cap = os.environ.get("DEEPBOF_THREADS")
    if cap:
        workers = min(workers, max(1, int(cap)))
    if workers <= 1 or len(vector_sets) <= 1:
        hists = [quantize(v, codebook) for v in vector_sets]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            hists = list(pool.map(lambda v: quantize(v, codebook), vector_sets))
    return np.stack(hists) if hists else np.empty((0, codebook.size))


def quantize_backward(
    vectors: np.ndarray, codebook: Codebook, upstream: np.ndarray
) -> BofGradients:
    """Exact gradients of ``loss`` through :func:`quantize`, given
    ``upstream = d loss / d histogram``.

    Chain: histogram averaging, soft-assignment normalization, the RBF
    exponential, and the Euclidean norm. At the norm's singular point
    (a vector exactly on a center) the subgradient 0 is used, so outputs
    stay finite. Rows that hit the uniform underflow fallback are locally
    constant and contribute zero gradient.
    """
    x = _check_vectors(vectors, codebook)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (codebook.size,):
        raise DimensionMismatchError(
            f"upstream shape {upstream.shape} does not match K={codebook.size}"
        )
    n, k = x.shape[0], codebook.size
    widths = codebook.widths

    d = np.sqrt(_sq_distances(x, codebook.centers))  # (N, K)
    raw = np.exp(-d / widths)
    totals = raw.sum(axis=1)  # (N,)
    alive = totals > 0.0
    p = np.zeros_like(raw)
    p[alive] = raw[alive] / totals[alive, None]

    # d loss / d raw_ij = (u_j - sum_k u_k p_ik) / (N * s_i), zero on
    # underflow rows.
    g_raw = np.zeros_like(raw)
    weighted = p @ upstream  # (N,)
    g_raw[alive] = (upstream[None, :] - weighted[alive, None]) / (
        n * totals[alive, None]
    )

    g_dist = g_raw * (-raw / widths)  # d loss / d distance_ij
    d_widths = (g_raw * raw * d).sum(axis=0) / widths**2

    d_inputs = np.zeros_like(x)
    d_centers = np.zeros_like(codebook.centers)
    for j in range(k):
        diff = x - codebook.centers[j]  # (N, C)
        dj = d[:, j]
        unit = np.zeros_like(diff)
        nz = dj > 0.0
        unit[nz] = diff[nz] / dj[nz, None]
        contrib = g_dist[:, j, None] * unit
        d_inputs += contrib
        d_centers[j] = -contrib.sum(axis=0)
    return BofGradients(d_centers, d_widths, d_inputs)


def _check_vectors(x: np.ndarray, codebook: Codebook) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionMismatchError(f"expected (N, C) vectors, got shape {x.shape}")
    if x.shape[1] != codebook.dim:
        raise DimensionMismatchError(
            f"vector dim {x.shape[1]} does not match codebook dim {codebook.dim}"
        )
    return x


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    """Write magic ``DBC1``, u32 K and C, K*C center floats, K widths,
    all little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(_CB_HEADER.pack(CODEBOOK_MAGIC, codebook.size, codebook.dim))
        fh.write(codebook.centers.astype("<f4").tobytes())
        fh.write(codebook.widths.astype("<f4").tobytes())


def load_codebook(path: str | Path) -> Codebook:
    with open(path, "rb") as fh:
        header = fh.read(_CB_HEADER.size)
        if len(header) < _CB_HEADER.size:
            raise TruncatedFileError(f"{path}: file shorter than the codebook header")
        magic, k, c = _CB_HEADER.unpack(header)
        if magic != CODEBOOK_MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
        payload = fh.read(4 * (k * c + k) + 1)
    if len(payload) < 4 * (k * c + k):
        raise TruncatedFileError(f"{path}: codebook payload shorter than declared")
    if len(payload) > 4 * (k * c + k):
        raise PayloadMismatchError(f"{path}: trailing bytes after codebook payload")
    centers = np.frombuffer(payload[: 4 * k * c], dtype="<f4").reshape(k, c)
    widths = np.frombuffer(payload[4 * k * c :], dtype="<f4")
    return Codebook(centers.astype(np.float64), widths.astype(np.float64))
