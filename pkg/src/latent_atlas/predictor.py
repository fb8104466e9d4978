"""Random forests on embedding coordinates with permuted 5-fold model selection."""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .dataio import DataError, label_sort_key
from .io_utils import checksum, decode_array, encode_array, read_json, write_json

MODEL_FORMAT = "latent-atlas/cv-ensemble"
MODEL_VERSION = 1


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int | None = None  # None: 1 for classification, 5 for regression
    mtry: int | None = None  # None: floor(sqrt(d)) / floor(d/3)

    def leaf_for(self, task: str) -> int:
        if self.min_samples_leaf is not None:
            return self.min_samples_leaf
        return 1 if task == "classification" else 5

    def mtry_for(self, task: str, d: int) -> int:
        if self.mtry is not None:
            return max(1, min(d, self.mtry))
        if task == "classification":
            return max(1, int(math.floor(math.sqrt(d))))
        return max(1, d // 3)


# ---------------------------------------------------------------- CART kernels


@numba.njit(cache=True, nogil=True)
def _grow_tree(X, yc, yr, n_classes, classif, mtry, max_depth, min_leaf, seed,
               feat, thr, left, right, value, base):
    """Grow one bootstrap CART tree into the node arrays starting at ``base``.

    Returns the number of nodes written. Leaves have feat == -1.
    """
    np.random.seed(seed)
    n, d = X.shape
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        idx[i] = np.random.randint(0, n)
    cap = 2 * n
    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    sp = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    sp = 1
    n_nodes = 1
    C = n_classes if classif else 1
    tot = np.zeros(C)
    cl = np.zeros(C)
    cr = np.zeros(C)
    perm = np.arange(d)
    vals = np.empty(n)
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        m = end - start
        g = base + node
        # node value
        pure = True
        if classif:
            tot[:] = 0.0
            for i in range(start, end):
                tot[yc[idx[i]]] += 1.0
            for c in range(C):
                value[g, c] = tot[c]
                if tot[c] != 0.0 and tot[c] != m:
                    pure = False
        else:
            s = 0.0
            y0 = yr[idx[start]]
            for i in range(start, end):
                s += yr[idx[i]]
                if yr[idx[i]] != y0:
                    pure = False
            value[g, 0] = s / m
        leaf = pure or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth)
        best_f = -1
        best_t = 0.0
        if not leaf:
            for i in range(d - 1, 0, -1):
                j = np.random.randint(0, i + 1)
                tmp = perm[i]
                perm[i] = perm[j]
                perm[j] = tmp
            best_score = -np.inf
            evaluated = 0
            for fi in range(d):
                if evaluated >= mtry and best_f >= 0:
                    break
                f = perm[fi]
                for i in range(m):
                    vals[i] = X[idx[start + i], f]
                order = np.argsort(vals[:m])
                if vals[order[0]] == vals[order[m - 1]]:
                    continue
                evaluated += 1
                if classif:
                    cl[:] = 0.0
                    sqL = 0.0
                    sqR = 0.0
                    for c in range(C):
                        cr[c] = tot[c]
                        sqR += tot[c] * tot[c]
                    for i in range(m - 1):
                        c = yc[idx[start + order[i]]]
                        sqL += 2.0 * cl[c] + 1.0
                        cl[c] += 1.0
                        sqR -= 2.0 * cr[c] - 1.0
                        cr[c] -= 1.0
                        a = vals[order[i]]
                        b = vals[order[i + 1]]
                        if a == b:
                            continue
                        nL = i + 1
                        nR = m - nL
                        if nL < min_leaf or nR < min_leaf:
                            continue
                        score = sqL / nL + sqR / nR
                        if score > best_score:
                            best_score = score
                            best_f = f
                            t = (a + b) / 2.0
                            best_t = t if t < b else a
                else:
                    sL = 0.0
                    sR = 0.0
                    for i in range(m):
                        sR += yr[idx[start + i]]
                    for i in range(m - 1):
                        yv = yr[idx[start + order[i]]]
                        sL += yv
                        sR -= yv
                        a = vals[order[i]]
                        b = vals[order[i + 1]]
                        if a == b:
                            continue
                        nL = i + 1
                        nR = m - nL
                        if nL < min_leaf or nR < min_leaf:
                            continue
                        score = sL * sL / nL + sR * sR / nR
                        if score > best_score:
                            best_score = score
                            best_f = f
                            t = (a + b) / 2.0
                            best_t = t if t < b else a
        if best_f < 0:
            feat[g] = -1
            thr[g] = 0.0
            left[g] = -1
            right[g] = -1
            continue
        # partition idx[start:end] so that x <= t comes first
        lo = start
        hi = end - 1
        while lo <= hi:
            if X[idx[lo], best_f] <= best_t:
                lo += 1
            else:
                tmpi = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = tmpi
                hi -= 1
        mid = lo
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        feat[g] = best_f
        thr[g] = best_t
        left[g] = lnode
        right[g] = rnode
        st_node[sp] = rnode
        st_start[sp] = mid
        st_end[sp] = end
        st_depth[sp] = depth + 1
        sp += 1
        st_node[sp] = lnode
        st_start[sp] = start
        st_end[sp] = mid
        st_depth[sp] = depth + 1
        sp += 1
    return n_nodes


@numba.njit(cache=True, nogil=True)
def _build_forest(X, yc, yr, n_classes, classif, mtry, max_depth, min_leaf, seeds):
    n = X.shape[0]
    T = seeds.shape[0]
    per = 2 * n
    C = n_classes if classif else 1
    feat = np.empty(T * per, dtype=np.int64)
    thr = np.empty(T * per)
    left = np.empty(T * per, dtype=np.int64)
    right = np.empty(T * per, dtype=np.int64)
    value = np.empty((T * per, C))
    offsets = np.zeros(T + 1, dtype=np.int64)
    pos = 0
    for t in range(T):
        cnt = _grow_tree(X, yc, yr, n_classes, classif, mtry, max_depth, min_leaf, seeds[t],
                         feat, thr, left, right, value, pos)
        pos += cnt
        offsets[t + 1] = pos
    return feat[:pos].copy(), thr[:pos].copy(), left[:pos].copy(), right[:pos].copy(), value[:pos].copy(), offsets


@numba.njit(cache=True, nogil=True)
def _leaf(x, feat, thr, left, right, base):
    node = 0
    while feat[base + node] >= 0:
        if x[feat[base + node]] <= thr[base + node]:
            node = left[base + node]
        else:
            node = right[base + node]
    return base + node


@numba.njit(cache=True, nogil=True)
def _predict_votes(X, feat, thr, left, right, value, offsets):
    n = X.shape[0]
    T = offsets.shape[0] - 1
    C = value.shape[1]
    out = np.zeros((n, C))
    for i in range(n):
        for t in range(T):
            g = _leaf(X[i], feat, thr, left, right, offsets[t])
            best = 0
            for c in range(1, C):
                if value[g, c] > value[g, best]:
                    best = c
            out[i, best] += 1.0
        for c in range(C):
            out[i, c] /= T
    return out


@numba.njit(cache=True, nogil=True)
def _predict_mean(X, feat, thr, left, right, value, offsets):
    n = X.shape[0]
    T = offsets.shape[0] - 1
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for t in range(T):
            s += value[_leaf(X[i], feat, thr, left, right, offsets[t]), 0]
        out[i] = s / T
    return out


# ---------------------------------------------------------------- forest


@dataclass
class ForestModel:
    task: str
    n_features: int
    n_classes: int
    feat: np.ndarray
    thr: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    offsets: np.ndarray
    seed: int | list[int] = 0

    @property
    def n_trees(self) -> int:
        return self.offsets.shape[0] - 1

    def tree_depths(self) -> list[int]:
        depths = []
        for t in range(self.n_trees):
            base = self.offsets[t]
            best, stack = 0, [(0, 0)]
            while stack:
                node, dep = stack.pop()
                best = max(best, dep)
                if self.feat[base + node] >= 0:
                    stack += [(self.left[base + node], dep + 1), (self.right[base + node], dep + 1)]
            depths.append(best)
        return depths

    def _check(self, X):
        X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if X.shape[1] != self.n_features:
            raise DataError(f"dimensionality mismatch: model expects {self.n_features} columns, got {X.shape[1]}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        return _predict_votes(self._check(X), self.feat, self.thr, self.left, self.right, self.value, self.offsets)

    def predict_value(self, X) -> np.ndarray:
        return _predict_mean(self._check(X), self.feat, self.thr, self.left, self.right, self.value, self.offsets)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "feat": encode_array(self.feat),
            "thr": encode_array(self.thr),
            "left": encode_array(self.left),
            "right": encode_array(self.right),
            "value": encode_array(self.value),
            "offsets": encode_array(self.offsets),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls(
            d["task"], d["n_features"], d["n_classes"],
            decode_array(d["feat"]), decode_array(d["thr"]), decode_array(d["left"]),
            decode_array(d["right"]), decode_array(d["value"]), decode_array(d["offsets"]), d["seed"],
        )


def tree_seeds(seed_key, n_trees: int) -> np.ndarray:
    return np.random.SeedSequence(seed_key).generate_state(n_trees).astype(np.int64)


def fit_forest(X, y, task: str, params: ForestParams | None = None, seed=0, n_classes: int | None = None) -> ForestModel:
    """Bootstrap CART forest; ``y`` holds class codes 0..C-1 or real values.

    ``seed`` may be an int or a sequence of ints (hashed by SeedSequence).
    """
    params = params or ForestParams()
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError("X and y must have matching rows")
    if X.shape[0] < 10:
        raise DataError("need at least 10 observations to fit a forest")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite coordinates")
    if params.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    classif = task == "classification"
    if classif:
        yc = y.astype(np.int64)
        C = int(n_classes if n_classes is not None else yc.max() + 1)
        if np.unique(yc).size < 2:
            raise DataError("classification needs at least 2 classes in the training data")
        yr = np.zeros(1)
    elif task == "regression":
        yr = y.astype(np.float64)
        yc = np.zeros(1, dtype=np.int64)
        C = 1
        if np.all(yr == yr[0]):
            warnings.warn("constant regression target; the forest predicts that constant")
    else:
        raise ValueError(f"unknown task {task!r}")
    md = -1 if params.max_depth is None else int(params.max_depth)
    seeds = tree_seeds(seed, params.n_trees)
    arrs = _build_forest(X, yc, yr, C, classif, params.mtry_for(task, X.shape[1]), md, params.leaf_for(task), seeds)
    seed_rec = [int(v) for v in seed] if isinstance(seed, (list, tuple)) else int(seed)
    return ForestModel(task, X.shape[1], C if classif else 0, *arrs, seed=seed_rec)


# ---------------------------------------------------------------- metrics


def _pearson_or_none(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    ac, bc = a - a.mean(), b - b.mean()
    return float(np.clip((ac @ bc) / math.sqrt((ac @ ac) * (bc @ bc)), -1.0, 1.0))


def evaluate(predictions, truth, task: str, classes=None) -> dict:
    """Accuracy + confusion (rows = truth, cols = predicted) or Pearson r + RMSE."""
    predictions = list(predictions) if task == "classification" else np.asarray(predictions, dtype=np.float64)
    truth = list(truth) if task == "classification" else np.asarray(truth, dtype=np.float64)
    if len(predictions) != len(truth):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(truth)} truths")
    if task == "classification":
        pred = [str(p) for p in predictions]
        tru = [str(t) for t in truth]
        labels = list(classes) if classes is not None else []
        labels += sorted((set(pred) | set(tru)) - set(labels), key=label_sort_key)
        pos = {c: i for i, c in enumerate(labels)}
        cm = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for t, p in zip(tru, pred):
            cm[pos[t], pos[p]] += 1
        acc = float(np.trace(cm) / max(1, len(tru)))
        return {"task": task, "n": len(tru), "accuracy": acc, "labels": labels, "confusion": cm.tolist()}
    if task == "regression":
        err = predictions - truth
        return {
            "task": task,
            "n": int(truth.size),
            "pearson_r": _pearson_or_none(predictions, truth),
            "rmse": float(math.sqrt(np.mean(err * err))) if truth.size else None,
        }
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------- cross-validation


def _running_mean(arrays) -> np.ndarray:
    # incremental form: identical members average to themselves exactly
    out = None
    for i, a in enumerate(arrays):
        out = a.copy() if out is None else out + (a - out) / (i + 1)
    return out


@dataclass
class CvEnsemble:
    task: str
    classes: list[str] | None
    models: list[ForestModel]
    winner: int
    folds: list[np.ndarray]
    fold_scores: np.ndarray  # (n_perms, k)
    global_scores: np.ndarray  # (n_perms,)
    degenerate: np.ndarray  # (n_perms,) bool
    master_seed: int
    params: ForestParams = field(default_factory=ForestParams)
    y_range: tuple[float, float] | None = None

    def predict_proba(self, X) -> np.ndarray:
        return _running_mean(m.predict_proba(X) for m in self.models)

    def predict(self, X):
        """Class labels (ties to the lower class index) or averaged values."""
        if self.task == "classification":
            proba = self.predict_proba(X)
            return [self.classes[i] for i in np.argmax(proba, axis=1)]
        return _running_mean(m.predict_value(X) for m in self.models)


def permutation_folds(n: int, k: int, master_seed: int, perm_id: int) -> list[np.ndarray]:
    perm = np.random.default_rng([int(master_seed), int(perm_id)]).permutation(n)
    return np.array_split(perm, k)


WORST = {"classification": 0.0, "regression": -1.0}


def _run_permutation(X, y, task, n_classes, k, master_seed, p, params, keep):
    folds = permutation_folds(X.shape[0], k, master_seed, p)
    scores = np.empty(k)
    models = []
    for f in range(k):
        val = folds[f]
        tr = np.sort(np.concatenate([folds[g] for g in range(k) if g != f]))
        if task == "classification" and np.unique(y[tr]).size < n_classes:
            scores[:] = WORST[task]
            return p, scores, True, None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = fit_forest(X[tr], y[tr], task, params, seed=[int(master_seed), int(p), f], n_classes=n_classes)
        if task == "classification":
            pred = np.argmax(m.predict_proba(X[val]), axis=1)
            scores[f] = float(np.mean(pred == y[val]))
        else:
            r = _pearson_or_none(m.predict_value(X[val]), y[val])
            scores[f] = WORST[task] if r is None else r
        models.append(m)
    return p, scores, False, models if keep else None


def train_cv(
    X, y, task: str, n_perms: int = 100, k: int = 5, master_seed: int = 0,
    params: ForestParams | None = None, threads: int = 1,
) -> CvEnsemble:
    """Pick the best of ``n_perms`` shuffled k-fold splits and keep its k fold forests.

    For classification ``y`` holds labels (any hashable, compared as str);
    for regression real values. Global score of a permutation is the mean
    validation metric over its folds (accuracy or Pearson r); the highest
    wins, ties to the lower permutation id. A permutation whose training
    fold misses a class scores worst-possible instead of aborting.
    """
    params = params or ForestParams()
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if n < 5 * k:
        raise DataError(f"need at least {5 * k} observations for {k}-fold cross-validation")
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    classes = None
    y_range = None
    if task == "classification":
        labels = [str(v) for v in y]
        classes = sorted(set(labels), key=label_sort_key)
        if len(classes) < 2:
            raise DataError("classification needs at least 2 classes")
        code = {c: i for i, c in enumerate(classes)}
        yy = np.array([code[v] for v in labels], dtype=np.int64)
        n_classes = len(classes)
    elif task == "regression":
        yy = np.asarray(y, dtype=np.float64)
        n_classes = 0
        y_range = (float(yy.min()), float(yy.max()))
    else:
        raise ValueError(f"unknown task {task!r}")
    if yy.shape[0] != n:
        raise DataError("X and y must have matching rows")

    fold_scores = np.empty((n_perms, k))
    degenerate = np.zeros(n_perms, dtype=bool)
    best_p, best_score, best_models = -1, -np.inf, None

    def job(p):
        return _run_permutation(X, yy, task, n_classes, k, master_seed, p, params, keep=True)

    def consume(res):
        nonlocal best_p, best_score, best_models
        p, scores, degen, models = res
        fold_scores[p] = scores
        degenerate[p] = degen
        g = float(scores.mean())
        if not degen and g > best_score:
            best_p, best_score, best_models = p, g, models

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for res in ex.map(job, range(n_perms)):  # results arrive in permutation order
                consume(res)
    else:
        for p in range(n_perms):
            consume(job(p))
    if best_models is None:
        raise DataError("every permutation left a class out of some training fold")
    return CvEnsemble(
        task, classes, best_models, best_p, permutation_folds(n, k, master_seed, best_p),
        fold_scores, fold_scores.mean(axis=1), degenerate, int(master_seed), params, y_range,
    )


def predict(ensemble: CvEnsemble, X_new):
    return ensemble.predict(X_new)


# ---------------------------------------------------------------- persistence


def ensemble_to_dict(ens: CvEnsemble) -> dict:
    payload = {
        "task": ens.task,
        "classes": ens.classes,
        "winner": ens.winner,
        "master_seed": ens.master_seed,
        "params": asdict(ens.params),
        "y_range": list(ens.y_range) if ens.y_range is not None else None,
        "folds": [f.tolist() for f in ens.folds],
        "fold_scores": ens.fold_scores.tolist(),
        "global_scores": ens.global_scores.tolist(),
        "degenerate": ens.degenerate.tolist(),
        "models": [m.to_dict() for m in ens.models],
    }
    return {"format": MODEL_FORMAT, "version": MODEL_VERSION, "checksum": checksum(payload), "payload": payload}


def ensemble_from_dict(d: dict) -> CvEnsemble:
    if d.get("format") != MODEL_FORMAT:
        raise ModelFileError("not a cross-validated forest model file")
    if d.get("version") != MODEL_VERSION:
        raise ModelFileError(f"model version {d.get('version')} not supported (expected {MODEL_VERSION})")
    payload = d.get("payload")
    if payload is None or checksum(payload) != d.get("checksum"):
        raise ModelFileError("model file is corrupt: checksum mismatch")
    return CvEnsemble(
        payload["task"], payload["classes"], [ForestModel.from_dict(m) for m in payload["models"]],
        payload["winner"], [np.asarray(f, dtype=np.int64) for f in payload["folds"]],
        np.asarray(payload["fold_scores"]), np.asarray(payload["global_scores"]),
        np.asarray(payload["degenerate"], dtype=bool), payload["master_seed"],
        ForestParams(**payload["params"]), tuple(payload["y_range"]) if payload["y_range"] else None,
    )


def save_model(ens: CvEnsemble, path) -> None:
    write_json(path, ensemble_to_dict(ens))


def load_model(path) -> CvEnsemble:
    try:
        d = read_json(path)
    except ValueError as exc:
        raise ModelFileError(f"model file is corrupt: {exc}") from None
    return ensemble_from_dict(d)
