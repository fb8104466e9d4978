"""Dataset loading, flattening, min-max scaling and target handling."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .io_utils import atomic_write_bytes, dumps_json


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    obs_ids: tuple[str, ...]
    feature_names: tuple[str, ...] | None = None
    tensor_shape: tuple[int, ...] | None = None
    dropped_ids: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "obs_ids", tuple(str(i) for i in self.obs_ids))
        if len(self.obs_ids) != v.shape[0]:
            raise DataError(f"{len(self.obs_ids)} ids for {v.shape[0]} rows")
        if len(set(self.obs_ids)) != len(self.obs_ids):
            raise DataError(f"duplicate observation ids: {_first_duplicate(self.obs_ids)!r}")
        if not np.all(np.isfinite(v)):
            raise DataError("feature matrix contains non-finite values")
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))
            if len(self.feature_names) != v.shape[1]:
                raise DataError("feature_names length does not match column count")
        if self.tensor_shape is not None:
            shape = tuple(int(s) for s in self.tensor_shape)
            if any(s <= 0 for s in shape) or math.prod(shape) != v.shape[1]:
                raise DataError(f"tensor_shape {list(shape)} does not multiply to {v.shape[1]} features")
            object.__setattr__(self, "tensor_shape", shape)

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def names(self) -> list[str]:
        if self.feature_names is not None:
            return list(self.feature_names)
        return [f"f{j}" for j in range(self.n_features)]

    def subset(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.intp)
        return replace(self, values=self.values[idx], obs_ids=tuple(self.obs_ids[i] for i in idx), dropped_ids=())

    def with_values(self, values: np.ndarray) -> "FeatureMatrix":
        return replace(self, values=values)

    def reshape_row(self, i: int) -> np.ndarray:
        if self.tensor_shape is None:
            raise DataError("no tensor_shape attached")
        return self.values[i].reshape(self.tensor_shape)


@dataclass(frozen=True)
class ScalingParams:
    min: np.ndarray
    max: np.ndarray
    constant_mask: np.ndarray

    def to_dict(self) -> dict:
        return {"min": self.min.tolist(), "max": self.max.tolist(), "constant_mask": self.constant_mask.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingParams":
        return cls(np.asarray(d["min"], float), np.asarray(d["max"], float), np.asarray(d["constant_mask"], bool))


@dataclass(frozen=True)
class TargetVariable:
    name: str
    kind: str  # "continuous" | "binary"
    values: np.ndarray
    obs_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "obs_ids", tuple(str(i) for i in self.obs_ids))
        if self.kind not in ("continuous", "binary"):
            raise DataError(f"unknown target kind {self.kind!r}")
        if self.obs_ids and len(self.obs_ids) != v.shape[0]:
            raise DataError(f"target {self.name!r}: {v.shape[0]} values for {len(self.obs_ids)} ids")
        if self.kind == "binary" and not np.all((v == 0) | (v == 1)):
            raise DataError(f"binary target {self.name!r} contains values other than 0/1")
        if not np.all(np.isfinite(v)):
            raise DataError(f"target {self.name!r} contains non-finite values")

    def aligned_to(self, obs_ids: Sequence[str]) -> "TargetVariable":
        """Reorder to ``obs_ids``; every id must be present."""
        pos = {o: i for i, o in enumerate(self.obs_ids)}
        missing = [o for o in obs_ids if o not in pos]
        if missing:
            raise DataError(f"target {self.name!r} has no value for observation {missing[0]!r}")
        idx = np.array([pos[o] for o in obs_ids], dtype=np.intp)
        return TargetVariable(self.name, self.kind, self.values[idx], tuple(obs_ids))


def _first_duplicate(items):
    seen = set()
    for x in items:
        if x in seen:
            return x
        seen.add(x)
    return None


def _parse_cell(text: str, row: int, col: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None


def read_csv_table(path, id_column: str) -> tuple[list[str], list[str], list[list[str]]]:
    """Return (header without id, ids, raw cell rows) from a headed CSV."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row expected") from None
        header = [h.strip() for h in header]
        if id_column not in header:
            raise DataError(f"{path}: id column {id_column!r} not in header")
        id_pos = header.index(id_column)
        ids, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: ragged row at line {lineno} ({len(rec)} cells, header has {len(header)})")
            ids.append(rec[id_pos].strip())
            rows.append([c.strip() for k, c in enumerate(rec) if k != id_pos])
    cols = [h for k, h in enumerate(header) if k != id_pos]
    dup = _first_duplicate(ids)
    if dup is not None:
        raise DataError(f"{path}: duplicate observation id {dup!r}")
    return cols, ids, rows


def load_feature_csv(
    path,
    id_column: str,
    *,
    exclude: Sequence[str] = (),
    tensor_shape: Sequence[int] | None = None,
    non_finite: str = "reject",
) -> FeatureMatrix:
    """Load a headed CSV into a :class:`FeatureMatrix`.

    Columns listed in ``exclude`` (targets, manually removed features) are
    skipped. ``non_finite`` is ``"reject"`` (error on NaN/Inf) or
    ``"drop_row"`` (drop the row and record its id in ``dropped_ids``).
    """
    if non_finite not in ("reject", "drop_row"):
        raise ValueError(f"unknown non_finite policy {non_finite!r}")
    cols, ids, rows = read_csv_table(path, id_column)
    unknown = set(exclude) - set(cols)
    if unknown:
        raise DataError(f"{path}: excluded columns not found: {sorted(unknown)}")
    keep = [k for k, c in enumerate(cols) if c not in set(exclude)]
    names = [cols[k] for k in keep]
    vals = np.empty((len(rows), len(keep)))
    good = np.ones(len(rows), dtype=bool)
    for r, rec in enumerate(rows):
        for j, k in enumerate(keep):
            vals[r, j] = _parse_cell(rec[k], r + 2, cols[k])
        if not np.all(np.isfinite(vals[r])):
            if non_finite == "reject":
                j = int(np.flatnonzero(~np.isfinite(vals[r]))[0])
                raise DataError(f"{path}: row {r + 2}, column {names[j]!r}: non-finite value")
            good[r] = False
    dropped = tuple(i for i, g in zip(ids, good) if not g)
    if dropped:
        warnings.warn(f"{path}: dropped {len(dropped)} rows with non-finite values")
    return FeatureMatrix(
        vals[good],
        tuple(i for i, g in zip(ids, good) if g),
        tuple(names),
        tuple(tensor_shape) if tensor_shape is not None else None,
        dropped,
    )


def load_tensor_dataset(data_path, sidecar_path, *, non_finite: str = "reject") -> FeatureMatrix:
    """Read raw little-endian float32 tensors plus a JSON sidecar and flatten row-major."""
    data_path, sidecar_path = Path(data_path), Path(sidecar_path)
    for p in (data_path, sidecar_path):
        if not p.is_file():
            raise DataError(f"no such file: {p}")
    meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
    try:
        n_obs = int(meta["n_obs"])
        shape = [int(s) for s in meta["shape"]]
        obs_ids = [str(o) for o in meta["obs_ids"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{sidecar_path}: sidecar needs n_obs, shape and obs_ids ({exc})") from None
    if len(obs_ids) != n_obs:
        raise DataError(f"{sidecar_path}: {len(obs_ids)} obs_ids but n_obs={n_obs}")
    n_feat = math.prod(shape)
    raw = data_path.read_bytes()
    expected = n_obs * n_feat * 4
    if len(raw) != expected:
        raise DataError(f"{data_path}: size mismatch, {len(raw)} bytes, expected {expected} (n_obs x prod(shape) x 4)")
    vals = np.frombuffer(raw, dtype="<f4").reshape(n_obs, n_feat).astype(np.float64)
    good = np.all(np.isfinite(vals), axis=1)
    if not good.all():
        if non_finite == "reject":
            raise DataError(f"{data_path}: observation {obs_ids[int(np.flatnonzero(~good)[0])]!r} has non-finite values")
        warnings.warn(f"{data_path}: dropped {int((~good).sum())} observations with non-finite values")
    return FeatureMatrix(
        vals[good],
        tuple(o for o, g in zip(obs_ids, good) if g),
        None,
        tuple(shape),
        tuple(o for o, g in zip(obs_ids, good) if not g),
    )


def tensor_bytes(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype="<f4").tobytes()


def save_tensor_dataset(data_path, sidecar_path, values: np.ndarray, shape: Sequence[int], obs_ids: Sequence[str]) -> None:
    values = np.asarray(values).reshape(len(obs_ids), -1)
    if values.shape[1] != math.prod(shape):
        raise DataError("values do not match the declared shape")
    atomic_write_bytes(data_path, tensor_bytes(values))
    sidecar = {"n_obs": len(obs_ids), "shape": [int(s) for s in shape], "obs_ids": [str(o) for o in obs_ids]}
    atomic_write_bytes(sidecar_path, dumps_json(sidecar).encode())


def scale_fit(train: FeatureMatrix) -> ScalingParams:
    if train.n_obs == 0:
        raise DataError("cannot fit scaling on an empty matrix")
    lo = train.values.min(axis=0)
    hi = train.values.max(axis=0)
    return ScalingParams(lo, hi, lo == hi)


def scale_apply(params: ScalingParams, m: FeatureMatrix) -> FeatureMatrix:
    """Map x to (x - min) / (max - min); constant features go to 0. No clamping."""
    if m.n_features != params.min.shape[0]:
        raise DataError(f"feature count mismatch: matrix has {m.n_features}, scaling was fit on {params.min.shape[0]}")
    span = np.where(params.constant_mask, 1.0, params.max - params.min)
    out = (m.values - params.min) / span
    out[:, params.constant_mask] = 0.0
    return m.with_values(out)


def label_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def sorted_labels(labels: Sequence[str]) -> list[str]:
    """Distinct labels, numeric ones in numeric order first."""
    return sorted(set(str(x) for x in labels), key=label_sort_key)


def binarize_target(labels: Sequence, obs_ids: Sequence[str] = ()) -> list[TargetVariable]:
    """One-vs-rest binary targets, one per distinct label, named after the label."""
    labels = [str(x) for x in labels]
    classes = sorted_labels(labels)
    if len(classes) < 2:
        raise DataError("categorical target needs at least 2 distinct labels")
    arr = np.array(labels, dtype=object)
    return [TargetVariable(c, "binary", (arr == c).astype(np.float64), tuple(obs_ids)) for c in classes]


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split; test size is ceil(n * test_fraction)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = math.ceil(n * test_fraction)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])
