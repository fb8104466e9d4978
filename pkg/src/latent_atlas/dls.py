"""Discrete latent space: unit-cube normalisation and automatic pixel resolution."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .io_utils import atomic_write_text, grid_to_image, write_pgm

MAX_CELLS = 2**26
BINNING_MODES = ("floor", "nearest")


class DLSWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Normalization:
    lo: np.ndarray
    hi: np.ndarray

    def apply(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != self.lo.shape[0]:
            raise ValueError(f"expected {self.lo.shape[0]}-D coordinates")
        return (coords - self.lo) / (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float))


@dataclass(frozen=True)
class DiscreteLatentSpace:
    R: int
    norm: Normalization
    point_pixels: np.ndarray  # (n_obs, D) int
    obs_ids: tuple[str, ...]
    binning: str = "floor"
    n_clamped: int = 0
    warnings: tuple[str, ...] = field(default=())

    @property
    def D(self) -> int:
        return self.point_pixels.shape[1]

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.R,) * self.D

    @property
    def n_obs(self) -> int:
        return self.point_pixels.shape[0]

    @property
    def occupancy(self) -> np.ndarray:
        return occupancy_grid(self.point_pixels, self.R)

    def linear_pixels(self) -> np.ndarray:
        return np.ravel_multi_index(tuple(self.point_pixels.T), self.shape)

    def realized_overlap(self) -> float:
        return overlap_of(self.point_pixels, self.R)


def normalize_embedding(coords: np.ndarray) -> tuple[np.ndarray, Normalization]:
    """Affine map of each dimension onto [0, 1]; the map is returned for reuse."""
    coords = np.asarray(coords, dtype=np.float64)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    flat = np.flatnonzero(hi <= lo)
    if flat.size:
        raise ValueError(f"embedding dimension {int(flat[0])} is constant; cannot normalise")
    norm = Normalization(lo, hi)
    return norm.apply(coords), norm


def pixel_indices(points01: np.ndarray, R: int, binning: str = "floor") -> tuple[np.ndarray, int]:
    """Pixel index per coordinate and the number of points that needed clamping.

    ``floor``: floor(u * R). ``nearest``: round(u * (R - 1)), i.e. pixel
    centres sit on a lattice that includes both cube faces.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    u = np.asarray(points01, dtype=np.float64)
    if binning == "floor":
        raw = np.floor(u * R)
        # u == 1 is in range by definition, only genuine excursions count as clamped
        outside = (u < 0.0) | (u > 1.0)
    elif binning == "nearest":
        raw = np.floor(u * (R - 1) + 0.5)
        outside = (u < 0.0) | (u > 1.0)
    else:
        raise ValueError(f"unknown binning mode {binning!r}")
    idx = np.clip(raw, 0, R - 1).astype(np.int64)
    return idx, int(np.atleast_2d(outside).any(axis=1).sum())


def overlap_of(pix: np.ndarray, R: int) -> float:
    n = pix.shape[0]
    lin = np.ravel_multi_index(tuple(pix.T), (R,) * pix.shape[1]) if R ** pix.shape[1] < 2**62 else None
    if lin is None:
        distinct = np.unique(pix, axis=0).shape[0]
    else:
        distinct = np.unique(lin).shape[0]
    return 1.0 - distinct / n


def overlap_at(points01: np.ndarray, R: int, binning: str = "floor") -> float:
    """1 - distinct occupied pixels / n_obs at resolution R."""
    pix, _ = pixel_indices(points01, R, binning)
    return overlap_of(pix, R)


@dataclass(frozen=True)
class ResolutionResult:
    R: int
    overlap: float
    satisfied: bool


def find_resolution(points01: np.ndarray, overlap_target: float = 0.05, R_max: int = 1024, binning: str = "floor") -> ResolutionResult:
    """Smallest R in [2, R_max] whose overlap is at most ``overlap_target``.

    Binary search assumes overlap shrinks as R grows. That is only true
    on average, so the candidate is then checked against every smaller R
    and the first one that already meets the target wins. When no R up to
    R_max qualifies, R_max comes back with ``satisfied=False`` and a warning.
    """
    pts = np.asarray(points01, dtype=np.float64)
    if pts.shape[0] < 2:
        raise ValueError("need at least 2 points")
    if not 0.0 <= overlap_target < 1.0:
        raise ValueError("overlap_target must be in [0, 1)")
    if R_max < 2:
        raise ValueError("R_max must be >= 2")
    cache: dict[int, float] = {}

    def ov(R):
        if R not in cache:
            cache[R] = overlap_at(pts, R, binning)
        return cache[R]

    if ov(R_max) > overlap_target:
        lo_ok = [R for R in range(2, R_max) if ov(R) <= overlap_target]
        if not lo_ok:
            msg = f"no resolution up to R_max={R_max} reaches overlap <= {overlap_target} (overlap at R_max is {ov(R_max):.4f})"
            warnings.warn(msg, DLSWarning)
            return ResolutionResult(R_max, ov(R_max), False)
        return ResolutionResult(lo_ok[0], ov(lo_ok[0]), True)
    lo, hi = 2, R_max
    while lo < hi:
        mid = (lo + hi) // 2
        if ov(mid) <= overlap_target:
            hi = mid
        else:
            lo = mid + 1
    cand = lo
    # overlap only shrinks with R on average, so an earlier R can still qualify
    for R in range(2, cand):
        if ov(R) <= overlap_target:
            cand = R
            break
    return ResolutionResult(cand, ov(cand), True)


def occupancy_grid(point_pixels: np.ndarray, R: int) -> np.ndarray:
    D = point_pixels.shape[1]
    if R**D > MAX_CELLS:
        raise ValueError(f"grid of {R}^{D} cells exceeds the {MAX_CELLS}-cell limit")
    occ = np.zeros((R,) * D, dtype=np.uint8)
    occ[tuple(point_pixels.T)] = 1
    return occ


def discretize(points01: np.ndarray, R: int, binning: str = "floor") -> tuple[np.ndarray, np.ndarray, int]:
    """Returns (point_pixels, occupancy, n_clamped)."""
    if R < 2:
        raise ValueError("R must be >= 2")
    pix, n_clamped = pixel_indices(points01, R, binning)
    return pix, occupancy_grid(pix, R), n_clamped


def build_dls(
    points: np.ndarray,
    obs_ids,
    norm: Normalization,
    overlap_target: float = 0.05,
    R_max: int = 1024,
    binning: str = "floor",
    R: int | None = None,
) -> tuple[DiscreteLatentSpace, ResolutionResult | None]:
    """Normalise ``points`` with ``norm``, pick R (unless given) and discretise."""
    u = norm.apply(points)
    D = u.shape[1]
    R_cap = int(np.floor(MAX_CELLS ** (1.0 / D) + 1e-9))
    notes = []
    res = None
    if R is None:
        if R_max > R_cap:
            notes.append(f"R_max lowered from {R_max} to {R_cap} by the {MAX_CELLS}-cell grid limit")
            R_max = R_cap
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DLSWarning)
            res = find_resolution(np.clip(u, 0.0, 1.0), overlap_target, R_max, binning)
        notes += [str(w.message) for w in caught]
        R = res.R
    pix, _, n_clamped = discretize(u, R, binning)
    if n_clamped:
        notes.append(f"{n_clamped} points fell outside the reference range and were clamped to edge pixels")
    for n in notes:
        warnings.warn(n, DLSWarning)
    return DiscreteLatentSpace(R, norm, pix, tuple(obs_ids), binning, n_clamped, tuple(notes)), res


def dls_to_dict(dls: DiscreteLatentSpace) -> dict:
    return {
        "R": dls.R,
        "D": dls.D,
        "binning": dls.binning,
        "normalization": dls.norm.to_dict(),
        "obs_ids": list(dls.obs_ids),
        "point_pixels": dls.point_pixels.tolist(),
        "n_clamped": dls.n_clamped,
        "realized_overlap": dls.realized_overlap(),
        "occupied_pixels": int(dls.occupancy.sum()),
        "warnings": list(dls.warnings),
    }


def dls_from_dict(d: dict) -> DiscreteLatentSpace:
    pix = np.asarray(d["point_pixels"], dtype=np.int64).reshape(len(d["obs_ids"]), d["D"])
    return DiscreteLatentSpace(
        int(d["R"]), Normalization.from_dict(d["normalization"]), pix, tuple(d["obs_ids"]),
        d["binning"], int(d["n_clamped"]), tuple(d["warnings"]),
    )


def export_occupancy(dls: DiscreteLatentSpace, csv_path, pgm_path=None) -> None:
    occ = dls.occupancy
    cells = np.argwhere(occ == 1)
    lines = [",".join(f"i{c}" for c in range(dls.D))]
    lines += [",".join(str(int(v)) for v in cell) for cell in cells]
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    if pgm_path is not None and dls.D == 2:
        write_pgm(pgm_path, grid_to_image(occ.astype(np.float64) * 255.0))
