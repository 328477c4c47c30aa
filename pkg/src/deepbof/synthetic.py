"""Desk-scale synthetic benchmark data.

Real masked-face datasets are too large to ship, so end-to-end behavior
is exercised on synthetic feature maps instead: each identity gets a
Gaussian channel signature, and every sample is that signature broadcast
over the spatial grid plus i.i.d. noise. With the default noise level the
identities are essentially perfectly separable, so a healthy pipeline
should score near 100% under cross-validation.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensorio


def make_synthetic_dataset(
    out_dir: str | Path,
    num_identities: int = 20,
    maps_per_identity: int = 30,
    shape: tuple[int, int, int] = (10, 10, 32),
    noise: float = 0.3,
    seed: int = 0,
    masked_fraction: float = 1 / 3,
) -> Path:
    """Write ``.dbf`` maps plus a manifest; returns the manifest path.

    Per identity, the first ``masked_fraction`` of samples carry the
    masked flag (the flag only drives oversampling; the feature
    distribution is identical), leaving the conditions imbalanced on
    purpose so the balancing path gets exercised.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    h, w, c = shape
    masked_per = max(1, round(maps_per_identity * masked_fraction))

    lines = []
    for i in range(num_identities):
        signature = rng.normal(0.0, 1.0, size=c)
        for j in range(maps_per_identity):
            fm = signature[None, None, :] + rng.normal(0.0, noise, size=(h, w, c))
            name = f"id{i:03d}_s{j:03d}.dbf"
            tensorio.write_feature_map(fm.astype(np.float32), out_dir / name)
            masked = "1" if j < masked_per else "0"
            lines.append(f"{name}\tid{i:03d}\t{masked}")

    manifest_path = out_dir / "manifest.tsv"
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path
