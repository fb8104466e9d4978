"""Inside-vs-outside Mann-Whitney effect sizes for each cluster."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.special
import scipy.stats

from .dataio import FeatureMatrix
from .dls import DiscreteLatentSpace
from .io_utils import atomic_write_text, fmt_float, write_pgm
from .statmap import Cluster

P_FLOOR = np.finfo(np.float64).tiny


class ProfileError(ValueError):
    pass


def _mwu_columns(A: np.ndarray, B: np.ndarray):
    """Vectorised U, z, p for each column of A (group a) against B (group b)."""
    na, nb = A.shape[0], B.shape[0]
    if na < 1 or nb < 1:
        raise ProfileError("both groups need at least one observation")
    N = na + nb
    both = np.vstack([A, B])
    ranks = scipy.stats.rankdata(both, axis=0, method="average")
    U = ranks[:na].sum(axis=0) - na * (na + 1) / 2.0
    mu = na * nb / 2.0
    # sum of (t^3 - t) over tie groups, per column
    srt = np.sort(both, axis=0)
    tie = np.zeros(both.shape[1])
    for j in range(both.shape[1]):
        _, counts = np.unique(srt[:, j], return_counts=True)
        t = counts[counts > 1].astype(np.float64)
        tie[j] = (t**3 - t).sum()
    if N > 1:
        var = na * nb / 12.0 * ((N + 1) - tie / (N * (N - 1)))
    else:
        var = np.zeros(both.shape[1])
    sd = np.sqrt(np.maximum(var, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (U - mu) / sd, 0.0)
    p = np.clip(2.0 * scipy.special.ndtr(-np.abs(z)), P_FLOOR, 1.0)
    return U, z, p


def mann_whitney(a, b) -> tuple[float, float, float]:
    """U for sample ``a`` (midranks), tie-corrected z, two-sided normal p.

    No continuity correction. When every value is tied, z = 0 and p = 1.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 1)
    U, z, p = _mwu_columns(a, b)
    return float(U[0]), float(z[0]), float(p[0])


def effect_size_r(z: float, N: int) -> float:
    if N < 2:
        raise ValueError("N must be >= 2")
    return abs(z) / math.sqrt(N)


def cluster_members(cluster: Cluster, dls: DiscreteLatentSpace) -> np.ndarray:
    """Boolean mask of the DLS observations whose pixel lies in the cluster."""
    shape = dls.shape
    cl = np.ravel_multi_index(tuple(np.asarray(cluster.pixels).T), shape)
    return np.isin(dls.linear_pixels(), cl)


@dataclass(frozen=True)
class EffectSizeProfile:
    cluster_id: int
    cluster_label: str
    feature_names: tuple[str, ...]
    U: np.ndarray
    z: np.ndarray
    p: np.ndarray
    r: np.ndarray
    direction: np.ndarray  # +1, -1, 0
    n_in: int
    n_out: int
    tensor_shape: tuple[int, ...] | None = None
    effect_threshold: float = 0.2

    @property
    def sufficient(self) -> bool:
        return bool(np.any(self.r >= self.effect_threshold))

    def signed_r(self) -> np.ndarray:
        return self.r * self.direction

    def r_map(self) -> np.ndarray | None:
        if self.tensor_shape is None:
            return None
        return self.signed_r().reshape(self.tensor_shape)

    def top_features(self, k: int) -> list[int]:
        return [int(i) for i in np.argsort(-self.r, kind="stable")[:k]]

    def summary(self, top: int = 5) -> dict:
        return {
            "cluster_id": self.cluster_id,
            "cluster": self.cluster_label,
            "n_in": self.n_in,
            "n_out": self.n_out,
            "max_r": float(self.r.max()) if self.r.size else 0.0,
            "sufficient_effect": self.sufficient,
            "status": "ok" if self.sufficient else "insufficient effect size",
            "top_features": [
                {
                    "feature": self.feature_names[j],
                    "z_U": float(self.z[j]),
                    "p": float(self.p[j]),
                    "r": float(self.r[j]),
                    "direction": _dir_text(self.direction[j]),
                }
                for j in self.top_features(top)
            ],
        }


def _dir_text(d) -> str:
    return {1: "+", -1: "-"}.get(int(d), "0")


def cluster_profile(
    cluster: Cluster,
    X: FeatureMatrix,
    dls: DiscreteLatentSpace,
    min_members: int = 5,
    effect_threshold: float = 0.2,
) -> EffectSizeProfile:
    """Per-feature Mann-Whitney of observations inside the cluster vs outside.

    Direction is the sign of (median inside - median outside); when the
    medians tie it falls back to the sign of U - n_in n_out / 2.
    """
    if tuple(X.obs_ids) != tuple(dls.obs_ids):
        raise ProfileError("feature matrix rows are not aligned with the DLS observations")
    inside = cluster_members(cluster, dls)
    n_in = int(inside.sum())
    n_out = X.n_obs - n_in
    if n_in == 0:
        raise ProfileError(f"cluster {cluster.label} covers no occupied pixel; not profilable")
    if n_in < min_members or n_out < min_members:
        raise ProfileError(f"cluster {cluster.label}: {n_in} inside / {n_out} outside, need >= {min_members} each")
    A, B = X.values[inside], X.values[~inside]
    U, z, p = _mwu_columns(A, B)
    N = n_in + n_out
    r = np.abs(z) / math.sqrt(N)
    med = np.sign(np.median(A, axis=0) - np.median(B, axis=0))
    by_u = np.sign(U - n_in * n_out / 2.0)
    direction = np.where(med != 0, med, by_u).astype(np.int64)
    direction[z == 0] = 0
    return EffectSizeProfile(
        cluster.id, cluster.label, tuple(X.names()), U, z, p, r, direction, n_in, n_out,
        X.tensor_shape, effect_threshold,
    )


PROFILE_HEADER = "cluster_id,feature_name,U,z,p,r,direction,n_in,n_out"


def profile_csv_rows(prof: EffectSizeProfile) -> list[str]:
    rows = []
    for j, name in enumerate(prof.feature_names):
        rows.append(",".join([
            prof.cluster_label, name, fmt_float(prof.U[j]), fmt_float(prof.z[j]), fmt_float(prof.p[j]),
            fmt_float(prof.r[j]), _dir_text(prof.direction[j]), str(prof.n_in), str(prof.n_out),
        ]))
    return rows


def write_profiles_csv(path, profiles: list[EffectSizeProfile]) -> None:
    lines = [PROFILE_HEADER]
    for prof in profiles:
        lines += profile_csv_rows(prof)
    atomic_write_text(path, "\n".join(lines) + "\n")


def signed_map_image(m: np.ndarray) -> np.ndarray:
    """Signed r in [-1, 1] mapped affinely to [0, 255]; 0 sits at mid-grey."""
    return (np.clip(m, -1.0, 1.0) + 1.0) / 2.0 * 255.0


def export_rmap(prof: EffectSizeProfile, stem) -> list[str]:
    """Write ``stem.f32`` + ``stem.json`` (and ``stem.pgm`` for 2-D tensors)."""
    from .dataio import save_tensor_dataset

    m = prof.r_map()
    if m is None:
        return []
    written = [f"{stem}.f32", f"{stem}.json"]
    save_tensor_dataset(f"{stem}.f32", f"{stem}.json", m.reshape(1, -1), m.shape, [prof.cluster_label])
    if m.ndim == 2:
        write_pgm(f"{stem}.pgm", signed_map_image(m))
        written.append(f"{stem}.pgm")
    return written
