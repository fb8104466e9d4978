"""Synthetic fixtures with known ground truth."""
from __future__ import annotations

import numpy as np

from .dataio import FeatureMatrix, TargetVariable


def two_blobs(
    n_per_blob: int = 200,
    n_features: int = 10,
    shifted: tuple[int, ...] = (3, 7),
    shift_sd: float = 3.0,
    seed: int = 0,
) -> tuple[FeatureMatrix, TargetVariable]:
    """Two isotropic unit-variance Gaussian blobs whose means differ only in ``shifted``.

    Blob 1 (target = 1) is displaced by ``shift_sd`` standard deviations
    along each shifted feature; rows are blob 0 then blob 1.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2 * n_per_blob, n_features))
    X[n_per_blob:, list(shifted)] += shift_sd
    y = np.r_[np.zeros(n_per_blob), np.ones(n_per_blob)]
    ids = tuple(f"b{i:04d}" for i in range(2 * n_per_blob))
    names = tuple(f"f{j}" for j in range(n_features))
    return FeatureMatrix(X, ids, names), TargetVariable("blob", "binary", y, ids)
