"""Gaussian proximity fields, per-pixel correlation maps and signed clusters."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage
import scipy.stats

from .dataio import DataError, TargetVariable
from .dls import DiscreteLatentSpace
from .io_utils import atomic_write_text, fmt_float, grid_to_image, write_pgm

TRUNCATE = 4.0


def default_sigma(dls_or_R) -> float:
    R = dls_or_R.R if isinstance(dls_or_R, DiscreteLatentSpace) else int(dls_or_R)
    return max(1.0, R / 32.0)


def _stencil(sigma: float, D: int):
    """Offsets within Euclidean radius 4*sigma and their Gaussian values."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    rad = int(math.floor(TRUNCATE * sigma))
    axes = np.arange(-rad, rad + 1)
    grids = np.meshgrid(*([axes] * D), indexing="ij")
    off = np.stack([g.ravel() for g in grids], axis=1)
    d2 = (off.astype(np.float64) ** 2).sum(axis=1)
    keep = d2 <= (TRUNCATE * sigma) ** 2
    return off[keep], np.exp(-d2[keep] / (2.0 * sigma * sigma))


def gaussian_slice(center, sigma: float, shape) -> np.ndarray:
    """Proximity of every pixel to ``center``: exp(-d^2 / 2 sigma^2) within 4 sigma, else 0."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    shape = tuple(int(s) for s in shape)
    center = np.asarray(center, dtype=np.float64)
    coords = np.indices(shape, dtype=np.float64)
    d2 = sum((coords[i] - center[i]) ** 2 for i in range(len(shape)))
    out = np.exp(-d2 / (2.0 * sigma * sigma))
    out[d2 > (TRUNCATE * sigma) ** 2] = 0.0
    return out


def proximity_stack(dls: DiscreteLatentSpace, sigma: float) -> np.ndarray:
    """Dense (n_cells, n_obs) proximity matrix. Memory grows with both; small grids only."""
    cells = dls.R**dls.D
    if cells * dls.n_obs > 50_000_000:
        raise MemoryError("proximity stack too large; use correlation_map directly")
    return np.stack([gaussian_slice(p, sigma, dls.shape).ravel() for p in dls.point_pixels], axis=1)


# ---------------------------------------------------------------- correlation


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if x.shape[0] < 3:
        raise ValueError("need at least 3 observations")
    return x, y


def pearson(x, y) -> float:
    """Pearson r, or NaN when either vector is constant."""
    x, y = _check_pair(x, y)
    if np.all(x == x[0]) or np.all(y == y[0]):
        return math.nan
    xc = x - x.mean()
    yc = y - y.mean()
    r = float((xc @ yc) / math.sqrt((xc @ xc) * (yc @ yc)))
    return min(1.0, max(-1.0, r))


def point_biserial(x, y) -> float:
    """(M1 - M0) / s_n * sqrt(p q) with y coded 0/1; equals Pearson r."""
    x, y = _check_pair(x, y)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("point-biserial needs y in {0, 1}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return math.nan
    one = y == 1
    p = one.mean()
    s = x.std()
    r = float((x[one].mean() - x[~one].mean()) / s * math.sqrt(p * (1.0 - p)))
    return min(1.0, max(-1.0, r))


METHODS = {"pearson": pearson, "point_biserial": point_biserial}


def correlate(x, y, method: str = "pearson") -> float:
    try:
        fn = METHODS[method.replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown correlation method {method!r}") from None
    return fn(x, y)


def r_pvalue(r: np.ndarray, n: int) -> np.ndarray:
    """Two-sided p of a correlation via t = r sqrt((n-2)/(1-r^2)), n-2 dof."""
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = r * np.sqrt((n - 2) / np.maximum(1.0 - r * r, 0.0))
    p = 2.0 * scipy.stats.t.sf(np.abs(t), n - 2)
    return np.where(np.isnan(r), np.nan, p)


@dataclass(frozen=True)
class CorrelationMap:
    r: np.ndarray  # grid, NaN where undefined
    p: np.ndarray
    method: str
    target: str
    sigma: float
    n_obs: int

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.r)

    @property
    def shape(self):
        return self.r.shape


def correlation_map(dls: DiscreteLatentSpace, sigma: float, target: TargetVariable, method: str = "pearson", chunk: int = 256) -> CorrelationMap:
    """Correlate the proximity vector of every pixel with the target.

    Sums over observations are accumulated stamp by stamp (sum x, sum x^2,
    sum x (y - mean y), and how many observations reach the pixel), so the
    n_cells x n_obs stack is never materialised. Pixels no observation
    reaches, and pixels where every observation has the same proximity,
    are undefined.
    """
    method = method.replace("-", "_")
    if method not in METHODS:
        raise ValueError(f"unknown correlation method {method!r}")
    if target.obs_ids and tuple(target.obs_ids) != tuple(dls.obs_ids):
        raise DataError(f"target {target.name!r} is not aligned with the DLS observations")
    y = np.asarray(target.values, dtype=np.float64)
    n = dls.n_obs
    if y.shape[0] != n:
        raise DataError(f"target {target.name!r} has {y.shape[0]} values for {n} observations")
    if method == "point_biserial" and not np.all((y == 0) | (y == 1)):
        raise DataError("point-biserial needs a 0/1 target")
    shape = dls.shape
    ncell = dls.R**dls.D
    r = np.full(ncell, np.nan)
    if n < 3 or np.all(y == y[0]):
        r = r.reshape(shape)
        return CorrelationMap(r, np.full(shape, np.nan), method, target.name, float(sigma), n)

    off, val = _stencil(sigma, dls.D)
    yc = y - y.mean()
    s1 = np.zeros(ncell)
    s2 = np.zeros(ncell)
    sxy = np.zeros(ncell)
    cover = np.zeros(ncell, dtype=np.int64)
    strides = np.array([dls.R ** (dls.D - 1 - i) for i in range(dls.D)], dtype=np.int64)
    for s in range(0, n, chunk):
        pix = dls.point_pixels[s : s + chunk]
        pos = pix[:, None, :] + off[None, :, :]
        ok = np.all((pos >= 0) & (pos < dls.R), axis=2)
        lin = (pos * strides).sum(axis=2)[ok]
        v = np.broadcast_to(val, ok.shape)[ok]
        wy = np.broadcast_to(yc[s : s + chunk, None], ok.shape)[ok]
        s1 += np.bincount(lin, weights=v, minlength=ncell)
        s2 += np.bincount(lin, weights=v * v, minlength=ncell)
        sxy += np.bincount(lin, weights=v * wy, minlength=ncell)
        cover += np.bincount(lin, minlength=ncell)

    defined = cover > 0
    full = np.flatnonzero(cover == n)
    if full.size:
        # every observation reaches these pixels: check for an exactly constant vector
        coords = np.stack(np.unravel_index(full, shape), axis=1).astype(np.float64)
        const = np.ones(full.size, dtype=bool)
        first = None
        for i in range(n):
            d2 = ((coords - dls.point_pixels[i]) ** 2).sum(axis=1)
            xi = np.exp(-d2 / (2.0 * sigma * sigma))
            if first is None:
                first = xi
            else:
                const &= xi == first
        defined[full[const]] = False

    syy = yc @ yc
    vx = s2 - s1 * s1 / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rr = sxy / np.sqrt(np.maximum(vx, 0.0) * syy)
    good = defined & (vx > 0)
    r[good] = np.clip(rr[good], -1.0, 1.0)
    r = r.reshape(shape)
    return CorrelationMap(r, r_pvalue(r, n), method, target.name, float(sigma), n)


# ---------------------------------------------------------------- clusters


@dataclass(frozen=True)
class Cluster:
    id: int
    sign: int
    pixels: np.ndarray  # (size, D)
    peak_r: float
    peak_pixel: tuple[int, ...]
    peak_p: float

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    @property
    def label(self) -> str:
        return f"{'pos' if self.sign > 0 else 'neg'}{self.id}"

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "sign": "+" if self.sign > 0 else "-",
            "size": self.size,
            "peak_r": self.peak_r,
            "peak_pixel": list(self.peak_pixel),
            "peak_p_uncorrected": self.peak_p,
            "pixels": self.pixels.tolist(),
        }


@dataclass(frozen=True)
class ClusterSet:
    clusters: list[Cluster]
    dropped: list[np.ndarray] = field(default_factory=list)
    r_min: float = 0.2
    connectivity: str = "full"
    min_pixels: int = 5

    def positive(self) -> list[Cluster]:
        return [c for c in self.clusters if c.sign > 0]

    def negative(self) -> list[Cluster]:
        return [c for c in self.clusters if c.sign < 0]


def _structure(D: int, connectivity) -> tuple[np.ndarray, str]:
    if connectivity in (None, "full", 8, "8", 26, "26") or connectivity == 3**D - 1:
        return scipy.ndimage.generate_binary_structure(D, D), "full"
    if connectivity in ("face", 4, "4", 6, "6") or connectivity == 2 * D:
        return scipy.ndimage.generate_binary_structure(D, 1), "face"
    raise ValueError(f"unknown connectivity {connectivity!r}")


def extract_clusters(cmap: CorrelationMap, r_min: float = 0.2, connectivity="full", min_pixels: int = 5) -> ClusterSet:
    """Connected components of {r >= r_min} and {r <= -r_min}.

    ``connectivity``: "full" (8-neighbourhood in 2-D, 3^D - 1 in general)
    or "face" (4-neighbourhood in 2-D). Components smaller than
    ``min_pixels`` are dropped. Clusters are ordered by peak |r|, positives
    before negatives on ties, then by their first pixel.
    """
    if not r_min > 0:
        raise ValueError("r_min must be > 0")
    r = cmap.r
    D = r.ndim
    struct, conn = _structure(D, connectivity)
    found, dropped = [], []
    with np.errstate(invalid="ignore"):
        masks = ((1, r >= r_min), (-1, r <= -r_min))
    for sign, mask in masks:
        mask = mask & ~np.isnan(r)
        lab, nlab = scipy.ndimage.label(mask, structure=struct)
        if nlab == 0:
            continue
        flat = lab.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(1, nlab + 2))
        rf = r.ravel()
        pf = cmap.p.ravel()
        for c in range(nlab):
            members = order[bounds[c] : bounds[c + 1]]
            pix = np.stack(np.unravel_index(members, r.shape), axis=1)
            if members.size < min_pixels:
                dropped.append(pix)
                continue
            vals = rf[members] * sign
            best = members[int(np.argmax(vals))]  # first max in linear order
            found.append((-float(abs(rf[best])), -sign, int(members[0]), sign, pix, float(rf[best]), best, float(pf[best])))
    found.sort(key=lambda t: t[:3])
    clusters = [
        Cluster(i + 1, t[3], t[4], t[5], tuple(int(v) for v in np.unravel_index(t[6], r.shape)), t[7])
        for i, t in enumerate(found)
    ]
    return ClusterSet(clusters, dropped, float(r_min), conn, int(min_pixels))


# ---------------------------------------------------------------- export

_AXIS_NAMES = ("x", "y", "z")


def _pixel_header(D: int) -> list[str]:
    return [f"pixel_{_AXIS_NAMES[i]}" if i < 3 else f"pixel_{i}" for i in range(D)]


def map_csv_text(cmap: CorrelationMap) -> str:
    D = cmap.r.ndim
    lines = [",".join(_pixel_header(D) + ["r", "p", "defined"])]
    rf, pf = cmap.r.ravel(), cmap.p.ravel()
    idx = np.stack(np.unravel_index(np.arange(rf.size), cmap.r.shape), axis=1)
    for k in range(rf.size):
        cells = [str(int(v)) for v in idx[k]]
        if np.isnan(rf[k]):
            cells += ["", "", "0"]
        else:
            cells += [fmt_float(rf[k]), fmt_float(pf[k]), "1"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def map_to_image(cmap: CorrelationMap) -> np.ndarray:
    img = np.where(np.isnan(cmap.r), 0.0, (cmap.r + 1.0) / 2.0 * 255.0)
    return grid_to_image(img)


def export_map(cmap: CorrelationMap, csv_path, pgm_path=None) -> None:
    atomic_write_text(csv_path, map_csv_text(cmap))
    if pgm_path is not None and cmap.r.ndim == 2:
        write_pgm(pgm_path, map_to_image(cmap))


def clusters_to_dict(cs: ClusterSet) -> dict:
    return {
        "r_min": cs.r_min,
        "connectivity": cs.connectivity,
        "min_pixels": cs.min_pixels,
        "n_positive": len(cs.positive()),
        "n_negative": len(cs.negative()),
        "n_dropped_small": len(cs.dropped),
        "clusters": [c.to_dict() for c in cs.clusters],
    }


def clusters_from_dict(d: dict) -> ClusterSet:
    cl = []
    for c in d["clusters"]:
        cl.append(Cluster(
            c["id"], 1 if c["sign"] == "+" else -1, np.asarray(c["pixels"], dtype=np.int64).reshape(c["size"], -1),
            c["peak_r"], tuple(c["peak_pixel"]), c["peak_p_uncorrected"],
        ))
    return ClusterSet(cl, [], d["r_min"], d["connectivity"], d["min_pixels"])
