"""UMAP-style embedding: exact kNN graph, fuzzy union, SGD layout.

Random uniform initialisation in [-10, 10]^d and brute-force neighbours
keep the whole fit deterministic for a given seed.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.sparse

from .dataio import DataError, FeatureMatrix, ScalingParams
from .io_utils import atomic_write_text, decode_array, encode_array, fmt_float, read_json, write_json

SIGMA_MIN = 1e-8
SIGMA_MAX = 1e8
CLIP = 4.0
MODEL_FORMAT = "latent-atlas/embedding-model"
MODEL_VERSION = 1


@dataclass(frozen=True)
class Embedding:
    coords: np.ndarray
    obs_ids: tuple[str, ...]

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2:
            raise DataError("embedding coordinates must be 2-D (n_obs x n_components)")
        if not np.all(np.isfinite(c)):
            raise DataError("embedding contains non-finite coordinates")
        if len(self.obs_ids) != c.shape[0]:
            raise DataError("embedding ids do not match coordinate rows")
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "obs_ids", tuple(str(o) for o in self.obs_ids))

    @property
    def n_obs(self) -> int:
        return self.coords.shape[0]

    @property
    def n_components(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class NeighborGraph:
    k: int
    indices: np.ndarray
    distances: np.ndarray


@dataclass(frozen=True)
class FuzzyGraph:
    weights: scipy.sparse.csr_matrix
    rho: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class EmbedParams:
    n_neighbors: int = 15
    min_dist: float = 0.1
    spread: float = 1.0
    n_components: int = 2
    n_epochs: int | None = None
    learning_rate: float = 1.0
    negative_sample_rate: int = 5
    transform_epochs: int = 0
    seed: int = 0

    def epochs_for(self, n_obs: int) -> int:
        if self.n_epochs is not None:
            return self.n_epochs
        return 500 if n_obs <= 10_000 else 200

    def validate(self):
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        if self.n_components < 2:
            raise ValueError("n_components must be >= 2")
        if not 0 < self.min_dist < self.spread * 10:
            raise ValueError("need 0 < min_dist < 10 * spread")
        if self.learning_rate <= 0 or self.negative_sample_rate < 0:
            raise ValueError("learning_rate must be > 0 and negative_sample_rate >= 0")
        if (self.n_epochs is not None and self.n_epochs < 0) or self.transform_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class EmbeddingModel:
    params: EmbedParams
    train_values: np.ndarray
    train_ids: tuple[str, ...]
    neighbors: NeighborGraph
    graph: FuzzyGraph
    a: float
    b: float
    embedding: Embedding
    scaling: ScalingParams | None = field(default=None)


# ---------------------------------------------------------------- neighbours


def _pairwise_knn(Q: np.ndarray, X: np.ndarray, k: int, exclude_self: bool):
    n_q, n = Q.shape[0], X.shape[0]
    idx = np.empty((n_q, k), dtype=np.int64)
    dist = np.empty((n_q, k), dtype=np.float64)
    # exact differences (not the |a|^2+|b|^2-2ab expansion) so duplicates sit at exactly 0
    chunk = max(1, int(4_000_000 // max(1, n * X.shape[1])))
    for s in range(0, n_q, chunk):
        block = Q[s : s + chunk]
        d = np.sqrt(((block[:, None, :] - X[None, :, :]) ** 2).sum(axis=2))
        if exclude_self:
            d[np.arange(block.shape[0]), np.arange(s, s + block.shape[0])] = np.inf
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s : s + chunk] = order
        dist[s : s + chunk] = np.take_along_axis(d, order, axis=1)
    return idx, dist


def knn_graph(X: FeatureMatrix | np.ndarray, k: int) -> NeighborGraph:
    """Exact Euclidean k nearest neighbours, self excluded, ties to the lower index."""
    V = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=np.float64)
    n = V.shape[0]
    if n < 2:
        raise ValueError("need at least 2 observations for a neighbour graph")
    if not 1 <= k < n:
        raise ValueError(f"k={k} must satisfy 1 <= k < n_obs={n}")
    idx, dist = _pairwise_knn(V, V, k, exclude_self=True)
    return NeighborGraph(k, idx, dist)


def _calibrate_rows(D: np.ndarray, k: int, tol: float, max_iter: int):
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    rho = D[:, 0].copy()
    excess = np.maximum(D - rho[:, None], 0.0)
    target = math.log2(k)

    def psum(sig):
        return np.exp(-excess / sig[:, None]).sum(axis=1)

    n = D.shape[0]
    lo = np.full(n, SIGMA_MIN)
    hi = np.full(n, SIGMA_MAX)
    s_lo, s_hi = psum(lo), psum(hi)
    sigma = np.sqrt(lo * hi)
    done = np.zeros(n, dtype=bool)
    # psum increases with sigma, so targets outside [psum(lo), psum(hi)] clamp
    low_clamp = s_lo >= target - tol
    high_clamp = s_hi <= target + tol
    sigma[high_clamp] = SIGMA_MAX
    sigma[low_clamp] = SIGMA_MIN
    done |= low_clamp | high_clamp
    for _ in range(max_iter):
        if done.all():
            break
        act = ~done
        mid = np.sqrt(lo[act] * hi[act])
        s = np.exp(-excess[act] / mid[:, None]).sum(axis=1)
        sigma[act] = mid
        conv = np.abs(s - target) <= tol
        above = s > target
        hi_a, lo_a = hi[act], lo[act]
        hi_a[above] = mid[above]
        lo_a[~above] = mid[~above]
        hi[act], lo[act] = hi_a, lo_a
        ai = np.flatnonzero(act)
        done[ai[conv]] = True
    return rho, np.clip(sigma, SIGMA_MIN, SIGMA_MAX)


def smooth_knn_calibrate(distances, k: int, tol: float = 1e-5, max_iter: int = 200) -> tuple[float, float]:
    """Return (rho, sigma) with sum_j exp(-max(0, d_j - rho) / sigma) ~= log2(k).

    The sum grows with sigma, so sigma is bisected geometrically inside
    [1e-8, 1e8]; unreachable targets clamp to the nearer bound.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.shape[0] < 2 or k < 2:
        raise ValueError("need a sorted distance vector of length >= 2 and k >= 2")
    if np.any(np.diff(d) < 0):
        raise ValueError("distances must be sorted ascending")
    rho, sigma = _calibrate_rows(d[None, :], k, tol, max_iter)
    return float(rho[0]), float(sigma[0])


def directed_weights(distances: np.ndarray, rho: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return np.exp(-np.maximum(distances - rho[:, None], 0.0) / sigma[:, None])


def fuzzy_union(weights: scipy.sparse.spmatrix) -> scipy.sparse.csr_matrix:
    """Symmetrise directed memberships with the probabilistic t-conorm."""
    W = scipy.sparse.csr_matrix(weights, dtype=np.float64)
    Wt = W.T.tocsr()
    U = (W + Wt - W.multiply(Wt)).tocsr()
    U.setdiag(0.0)
    U.eliminate_zeros()
    U.sort_indices()
    return U


def fuzzy_graph(neighbors: NeighborGraph, tol: float = 1e-5, max_iter: int = 200) -> FuzzyGraph:
    n = neighbors.indices.shape[0]
    k = neighbors.k
    if k >= 2:
        rho, sigma = _calibrate_rows(neighbors.distances, k, tol, max_iter)
    else:
        # log2(1) = 0 is unreachable (the nearest neighbour alone contributes 1)
        rho, sigma = neighbors.distances[:, 0].copy(), np.full(n, SIGMA_MIN)
    w = directed_weights(neighbors.distances, rho, sigma)
    rows = np.repeat(np.arange(n), k)
    W = scipy.sparse.csr_matrix((w.ravel(), (rows, neighbors.indices.ravel())), shape=(n, n))
    W.eliminate_zeros()
    return FuzzyGraph(fuzzy_union(W), rho, sigma)


# ---------------------------------------------------------------- curve fit


def _phi(x, a, b):
    return 1.0 / (1.0 + a * x ** (2 * b))


def curve_target(min_dist: float, spread: float, n: int = 300):
    x = np.linspace(0.0, 3.0 * spread, n)
    y = np.where(x <= min_dist, 1.0, np.exp(-(x - min_dist) / spread))
    return x, y


def fit_curve_ab(min_dist: float, spread: float, n_iter: int = 200) -> tuple[float, float]:
    """Fit 1 / (1 + a x^(2b)) to the offset exponential by Levenberg-Marquardt.

    Fixed iteration budget, fixed start (a=1, b=1); a warning carries the
    residual when the relative step never dropped below 1e-12.
    """
    if not 0 < min_dist < spread * 10:
        raise ValueError("need 0 < min_dist < 10 * spread")
    x, y = curve_target(min_dist, spread)
    logx = np.log(np.where(x > 0, x, 1.0))
    p = np.array([1.0, 1.0])
    lam = 1e-3

    def resid(p):
        return _phi(x, p[0], p[1]) - y

    r = resid(p)
    cost = r @ r
    converged = False
    for _ in range(n_iter):
        a, b = p
        xb = np.where(x > 0, x ** (2 * b), 0.0)
        den = (1.0 + a * xb) ** 2
        J = np.column_stack([-xb / den, -a * xb * 2.0 * logx / den])
        g = J.T @ r
        H = J.T @ J
        step = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
        cand = p + step
        if np.all(cand > 0):
            rc = resid(cand)
            cc = rc @ rc
            if cc < cost:
                small = np.all(np.abs(step) <= 1e-12 * (np.abs(p) + 1e-12))
                p, r, cost = cand, rc, cc
                lam = max(lam / 10.0, 1e-12)
                if small:
                    converged = True
                    break
                continue
        lam *= 10.0
        if lam > 1e12:
            converged = True
            break
    if not converged:
        warnings.warn(f"curve fit for (a, b) stopped after {n_iter} iterations, residual {cost:.3e}")
    return float(p[0]), float(p[1])


# ---------------------------------------------------------------- layout


@numba.njit(cache=True, nogil=True)
def _is_neighbor(indptr, indices, i, j):
    lo = indptr[i]
    hi = indptr[i + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        v = indices[mid]
        if v == j:
            return True
        if v < j:
            lo = mid + 1
        else:
            hi = mid
    return False


@numba.njit(cache=True, nogil=True)
def _clip(v):
    if v > 4.0:
        return 4.0
    if v < -4.0:
        return -4.0
    return v


@numba.njit(cache=True, nogil=True)
def _sgd_kernel(emb, head, tail, eps, indptr, indices, a, b, n_epochs, lr, neg_rate, move_mask, ref_count, seed):
    """Edge-sampled SGD. Only rows with move_mask set are updated.

    Negative samples are drawn from rows [0, ref_count) and rejected when
    they are graph neighbours of the head vertex (bounded retries).
    """
    np.random.seed(seed)
    n_edges = head.shape[0]
    dim = emb.shape[1]
    next_sample = eps.copy()
    for epoch in range(n_epochs):
        alpha = lr * (1.0 - epoch / n_epochs)
        for e in range(n_edges):
            if next_sample[e] > epoch + 1:
                continue
            j = head[e]
            k = tail[e]
            d2 = 0.0
            for c in range(dim):
                diff = emb[j, c] - emb[k, c]
                d2 += diff * diff
            if d2 > 0.0:
                gc = -2.0 * a * b * d2 ** (b - 1.0) / (a * d2**b + 1.0)
            else:
                gc = 0.0
            for c in range(dim):
                g = _clip(gc * (emb[j, c] - emb[k, c]))
                if move_mask[j]:
                    emb[j, c] += g * alpha
                if move_mask[k]:
                    emb[k, c] -= g * alpha
            next_sample[e] += eps[e]
            for _ in range(neg_rate):
                m = -1
                for _try in range(10):
                    cand = np.random.randint(0, ref_count)
                    if cand != j and not _is_neighbor(indptr, indices, j, cand):
                        m = cand
                        break
                if m < 0:
                    continue
                d2 = 0.0
                for c in range(dim):
                    diff = emb[j, c] - emb[m, c]
                    d2 += diff * diff
                if d2 > 0.0:
                    gc = 2.0 * b / ((0.001 + d2) * (a * d2**b + 1.0))
                else:
                    gc = 0.0
                if move_mask[j]:
                    for c in range(dim):
                        if gc > 0.0:
                            g = _clip(gc * (emb[j, c] - emb[m, c]))
                        else:
                            g = 4.0
                        emb[j, c] += g * alpha
    return emb


def _edge_arrays(W: scipy.sparse.csr_matrix):
    coo = W.tocoo()
    order = np.lexsort((coo.col, coo.row))
    head = coo.row[order].astype(np.int64)
    tail = coo.col[order].astype(np.int64)
    w = coo.data[order]
    return head, tail, w


def _epochs_per_sample(w: np.ndarray) -> np.ndarray:
    if w.size == 0:
        return w.astype(np.float64)
    return w.max() / w


def layout_sgd(
    graph: FuzzyGraph | scipy.sparse.spmatrix,
    init: Embedding | np.ndarray,
    a: float,
    b: float,
    epochs: int,
    learning_rate: float = 1.0,
    negative_sample_rate: int = 5,
    seed: int = 0,
) -> np.ndarray:
    """Optimise the low-dimensional layout of a fuzzy graph; returns new coordinates."""
    W = graph.weights if isinstance(graph, FuzzyGraph) else scipy.sparse.csr_matrix(graph)
    W = scipy.sparse.csr_matrix(W)
    W.sort_indices()
    Y = np.array(init.coords if isinstance(init, Embedding) else init, dtype=np.float64, copy=True)
    n = Y.shape[0]
    if W.shape[0] != n:
        raise ValueError(f"init has {n} rows, graph has {W.shape[0]} vertices")
    if epochs <= 0 or n < 2 or W.nnz == 0:
        return Y
    head, tail, w = _edge_arrays(W)
    eps = _epochs_per_sample(w)
    _sgd_kernel(
        Y, head, tail, eps,
        W.indptr.astype(np.int64), W.indices.astype(np.int64),
        float(a), float(b), int(epochs), float(learning_rate), int(negative_sample_rate),
        np.ones(n, dtype=np.bool_), n, _numba_seed(seed),
    )
    return Y


def _numba_seed(seed) -> int:
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def random_init(n: int, d: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-10.0, 10.0, size=(n, d))


def fit(X: FeatureMatrix, params: EmbedParams | None = None, scaling: ScalingParams | None = None):
    """Fit the embedding; returns ``(model, embedding)``."""
    params = params or EmbedParams()
    params.validate()
    nbrs = knn_graph(X, params.n_neighbors)
    graph = fuzzy_graph(nbrs)
    a, b = fit_curve_ab(params.min_dist, params.spread)
    init = random_init(X.n_obs, params.n_components, params.seed)
    Y = layout_sgd(
        graph, init, a, b, params.epochs_for(X.n_obs),
        params.learning_rate, params.negative_sample_rate, params.seed,
    )
    emb = Embedding(Y, X.obs_ids)
    model = EmbeddingModel(params, X.values.copy(), X.obs_ids, nbrs, graph, a, b, emb, scaling)
    return model, emb


def transform(model: EmbeddingModel, X_new: FeatureMatrix | np.ndarray, obs_ids=None, transform_epochs: int | None = None) -> Embedding:
    """Place new points at the membership-weighted mean of their training neighbours.

    Membership of training neighbour j is exp(-max(0, d - rho_j) / sigma_j).
    A point at distance 0 from training rows lands on their mean; if every
    membership underflows, the point takes its nearest neighbour's position.
    """
    if isinstance(X_new, FeatureMatrix):
        V, ids = X_new.values, X_new.obs_ids
    else:
        V = np.atleast_2d(np.asarray(X_new, dtype=np.float64))
        ids = tuple(obs_ids) if obs_ids is not None else tuple(f"new{i}" for i in range(V.shape[0]))
    if V.shape[1] != model.train_values.shape[1]:
        raise DataError(f"feature count mismatch: {V.shape[1]} vs {model.train_values.shape[1]} in training")
    Y_train = model.embedding.coords
    k = model.neighbors.k
    idx, dist = _pairwise_knn(V, model.train_values, k, exclude_self=False)
    w = np.exp(-np.maximum(dist - model.graph.rho[idx], 0.0) / model.graph.sigma[idx])
    out = np.empty((V.shape[0], Y_train.shape[1]))
    for i in range(V.shape[0]):
        zero = dist[i] == 0.0
        if zero.any():
            out[i] = Y_train[idx[i][zero]].mean(axis=0)
        elif w[i].sum() > 0.0:
            out[i] = (w[i][:, None] * Y_train[idx[i]]).sum(axis=0) / w[i].sum()
        else:
            out[i] = Y_train[idx[i, 0]]
    epochs = model.params.transform_epochs if transform_epochs is None else transform_epochs
    if epochs > 0 and V.shape[0] > 0:
        out = _refine(model, out, idx, w, epochs)
    return Embedding(out, ids)


def _refine(model: EmbeddingModel, Y_new, idx, w, epochs):
    n_train = model.embedding.n_obs
    n_new = Y_new.shape[0]
    Y = np.vstack([model.embedding.coords, Y_new])
    head = np.repeat(np.arange(n_train, n_train + n_new), idx.shape[1]).astype(np.int64)
    tail = idx.ravel().astype(np.int64)
    wf = w.ravel()
    keep = wf > 0
    head, tail, wf = head[keep], tail[keep], wf[keep]
    if wf.size == 0:
        return Y_new
    # neighbour lookup table for negative-sample rejection, rows sorted
    indptr = np.zeros(n_train + n_new + 1, dtype=np.int64)
    counts = np.bincount(head, minlength=n_train + n_new)
    indptr[1:] = np.cumsum(counts)
    order = np.lexsort((tail, head))
    indices = tail[order]
    move = np.zeros(n_train + n_new, dtype=np.bool_)
    move[n_train:] = True
    _sgd_kernel(
        Y, head[order], tail[order], _epochs_per_sample(wf[order]), indptr, indices,
        model.a, model.b, int(epochs), model.params.learning_rate / 4.0,
        model.params.negative_sample_rate, move, n_train, _numba_seed(model.params.seed + 1),
    )
    return Y[n_train:]


# ---------------------------------------------------------------- persistence and CSV


def write_embedding_csv(path, emb: Embedding) -> None:
    lines = ["id," + ",".join(f"dim{c}" for c in range(emb.n_components))]
    for oid, row in zip(emb.obs_ids, emb.coords):
        lines.append(oid + "," + ",".join(fmt_float(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_precomputed(path, id_column: str = "id") -> Embedding:
    """Read an ``id,dim0,dim1,...`` coordinate CSV."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if id_column not in header:
            raise DataError(f"{path}: id column {id_column!r} missing")
        ip = header.index(id_column)
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: ragged row at line {lineno}")
            ids.append(rec[ip].strip())
            vals = []
            for k, cell in enumerate(rec):
                if k == ip:
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: line {lineno}, column {header[k]!r}: cannot parse {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: line {lineno}, column {header[k]!r}: non-finite coordinate")
                vals.append(v)
            rows.append(vals)
    if len(header) - 1 < 2:
        raise DataError(f"{path}: need at least 2 coordinate columns")
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate ids")
    return Embedding(np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1), tuple(ids))


def model_to_dict(model: EmbeddingModel) -> dict:
    W = model.graph.weights
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "params": asdict(model.params),
        "a": model.a,
        "b": model.b,
        "scaling": model.scaling.to_dict() if model.scaling is not None else None,
        "train_ids": list(model.train_ids),
        "train_values": encode_array(model.train_values),
        "embedding": encode_array(model.embedding.coords),
        "knn": {"k": model.neighbors.k, "indices": encode_array(model.neighbors.indices), "distances": encode_array(model.neighbors.distances)},
        "graph": {
            "n": W.shape[0],
            "indptr": encode_array(W.indptr.astype(np.int64)),
            "indices": encode_array(W.indices.astype(np.int64)),
            "data": encode_array(W.data),
            "rho": encode_array(model.graph.rho),
            "sigma": encode_array(model.graph.sigma),
        },
    }


def model_from_dict(d: dict) -> EmbeddingModel:
    if d.get("format") != MODEL_FORMAT:
        raise DataError("not an embedding model file")
    if d.get("version") != MODEL_VERSION:
        raise DataError(f"embedding model version {d.get('version')} not supported (expected {MODEL_VERSION})")
    g = d["graph"]
    W = scipy.sparse.csr_matrix((decode_array(g["data"]), decode_array(g["indices"]), decode_array(g["indptr"])), shape=(g["n"], g["n"]))
    ids = tuple(d["train_ids"])
    return EmbeddingModel(
        EmbedParams(**d["params"]),
        decode_array(d["train_values"]),
        ids,
        NeighborGraph(d["knn"]["k"], decode_array(d["knn"]["indices"]), decode_array(d["knn"]["distances"])),
        FuzzyGraph(W, decode_array(g["rho"]), decode_array(g["sigma"])),
        float(d["a"]),
        float(d["b"]),
        Embedding(decode_array(d["embedding"]), ids),
        ScalingParams.from_dict(d["scaling"]) if d["scaling"] is not None else None,
    )


def save_model(model: EmbeddingModel, path) -> None:
    write_json(path, model_to_dict(model))


def load_model(path) -> EmbeddingModel:
    return model_from_dict(read_json(path))
