"""Config-driven stages: ingest, embed, transform, dls, map, profile, train, predict, report.

Every stage reads what earlier stages left in the output directory and
writes its own artifacts atomically, so ``run_pipeline`` is literally the
stages called in order. Nothing here depends on wall-clock time except
the ``timings`` and ``generated_at`` fields of ``report.json`` and the
``timings.json`` file.
"""
from __future__ import annotations

import datetime as _dt
import platform
import re
import shutil
import sys
import time
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from . import dls as dls_mod
from . import embedder as emb_mod
from . import predictor as pred_mod
from . import profiler as prof_mod
from . import statmap as stat_mod
from .config import PipelineConfig
from .dataio import (
    DataError,
    FeatureMatrix,
    ScalingParams,
    TargetVariable,
    binarize_target,
    load_feature_csv,
    load_tensor_dataset,
    read_csv_table,
    scale_apply,
    scale_fit,
    sorted_labels,
    split_indices,
)
from .io_utils import atomic_write_text, decode_array, encode_array, read_json, write_json
from .render import scatter_svg

STAGES = ("ingest", "embed", "transform", "dls", "map", "profile", "train", "predict", "report")
STANDING_NOTES = [
    "per-pixel and per-cluster p-values are uncorrected for multiple comparisons",
    "Mann-Whitney z uses tie-corrected variance without continuity correction; p is two-sided (normal approximation)",
    "per-feature profile p-values are reported raw (no FDR control)",
]


class StageOrderError(RuntimeError):
    """A stage was invoked before the stage that produces its inputs."""


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


# ---------------------------------------------------------------- workspace helpers


def _need(path: Path, stage: str) -> Path:
    if not path.is_file():
        raise StageOrderError(f"missing {path.name} in {path.parent}: run {stage} first (`latent-atlas {stage} --config ...`)")
    return path


def _write_summary(cfg: PipelineConfig, stage: str, summary: dict) -> None:
    write_json(cfg.out / "stages" / f"{stage}.json", summary)


def _load_summary(cfg: PipelineConfig, stage: str) -> dict | None:
    p = cfg.out / "stages" / f"{stage}.json"
    return read_json(p) if p.is_file() else None


def _features(role_entry: dict, meta: dict) -> FeatureMatrix:
    return FeatureMatrix(
        decode_array(role_entry["values"]), tuple(role_entry["obs_ids"]), tuple(meta["feature_names"]),
        tuple(meta["tensor_shape"]) if meta["tensor_shape"] else None,
    )


def _read_coords(path: Path) -> emb_mod.Embedding:
    return emb_mod.load_precomputed(path)


# ---------------------------------------------------------------- ingest


def _load_source(cfg: PipelineConfig, role: str):
    src = cfg.datasets[role]
    exclude = list(src.exclude_features)
    if src.format == "csv":
        inline_targets = list(src.targets) if src.targets_path is None else []
        fm = load_feature_csv(
            cfg.resolve(src.path), src.id_column, exclude=exclude + inline_targets,
            tensor_shape=src.tensor_shape, non_finite=cfg.scaling.non_finite,
        )
    else:
        fm = load_tensor_dataset(cfg.resolve(src.path), cfg.resolve(src.sidecar), non_finite=cfg.scaling.non_finite)
        if exclude:
            raise DataError(f"datasets.{role}: exclude_features is only supported for CSV input")
        if src.tensor_shape is not None and tuple(src.tensor_shape) != fm.tensor_shape:
            raise DataError(f"datasets.{role}: tensor_shape {src.tensor_shape} disagrees with sidecar {list(fm.tensor_shape)}")
    targets = {}
    if src.targets:
        tpath = cfg.resolve(src.targets_path or src.path)
        cols, ids, rows = read_csv_table(tpath, src.id_column)
        pos = {o: i for i, o in enumerate(ids)}
        for col, kind in src.targets.items():
            if col not in cols:
                raise DataError(f"{tpath}: target column {col!r} not found")
            j = cols.index(col)
            raw = []
            for oid in fm.obs_ids:
                if oid not in pos:
                    raise DataError(f"{tpath}: no target value for observation {oid!r}")
                raw.append(rows[pos[oid]][j])
            targets[col] = {"kind": kind, "values": _parse_target(raw, kind, col)}
    return fm, targets


def _parse_target(raw: list[str], kind: str, col: str):
    if kind == "categorical":
        return [str(v) for v in raw]
    out = []
    for v in raw:
        try:
            x = float(v)
        except ValueError:
            raise DataError(f"target {col!r}: cannot parse {v!r} as a number") from None
        if not np.isfinite(x):
            raise DataError(f"target {col!r}: non-finite value")
        if kind == "binary" and x not in (0.0, 1.0):
            raise DataError(f"binary target {col!r} has value {v!r} (expected 0/1)")
        out.append(x)
    return out


def _subset_targets(targets: dict, idx) -> dict:
    return {c: {"kind": t["kind"], "values": [t["values"][i] for i in idx]} for c, t in targets.items()}


def stage_ingest(cfg: PipelineConfig) -> dict:
    fm, targets = _load_source(cfg, "embedding")
    roles: dict[str, dict] = {}
    sources = {"embedding": "embedding"}
    if cfg.split is not None:
        tr, te = split_indices(fm.n_obs, cfg.split.test_fraction, cfg.seed)
        roles["embedding"] = (fm.subset(tr), _subset_targets(targets, tr))
        for r in cfg.split.test_roles:
            roles[r] = (fm.subset(te), _subset_targets(targets, te))
            sources[r] = "split"
    else:
        roles["embedding"] = (fm, targets)
    for r in ("statistics", "prediction"):
        if r not in roles and cfg.datasets[r] is not None:
            roles[r] = _load_source(cfg, r)
            sources[r] = r
    alias = {}
    if "statistics" not in roles:
        alias["statistics"] = "embedding"
    names = roles["embedding"][0].names()
    for r, (m, _) in roles.items():
        if m.names() != names:
            raise DataError(f"{r} set features do not match the embedding set ({m.n_features} vs {len(names)})")
    if cfg.scaling.method == "minmax":
        params = scale_fit(roles["embedding"][0])
        scaled = {r: (scale_apply(params, m), t) for r, (m, t) in roles.items()}
    else:
        params = None
        scaled = roles
    meta = {
        "feature_names": names,
        "tensor_shape": list(fm.tensor_shape) if fm.tensor_shape else None,
        "scaling": params.to_dict() if params is not None else None,
        "constant_features": [names[j] for j in np.flatnonzero(params.constant_mask)] if params is not None else [],
        "roles": {},
        "aliases": alias,
    }
    dropped = {}
    for r, (m, t) in scaled.items():
        meta["roles"][r] = {"source": sources.get(r, r), "obs_ids": list(m.obs_ids), "values": encode_array(m.values), "targets": t}
        if roles[r][0].dropped_ids or (r == "embedding" and fm.dropped_ids):
            dropped[r] = list(roles[r][0].dropped_ids or fm.dropped_ids)
    write_json(cfg.out / "ingest.json", meta)
    return {
        "roles": {r: len(e["obs_ids"]) for r, e in meta["roles"].items()},
        "aliases": alias,
        "n_features": len(names),
        "tensor_shape": meta["tensor_shape"],
        "constant_features": len(meta["constant_features"]),
        "dropped_rows": dropped,
    }


def _ingest(cfg: PipelineConfig) -> dict:
    return read_json(_need(cfg.out / "ingest.json", "ingest"))


def _role(meta: dict, role: str) -> dict | None:
    if role in meta["roles"]:
        return meta["roles"][role]
    if role in meta.get("aliases", {}):
        return meta["roles"][meta["aliases"][role]]
    return None


# ---------------------------------------------------------------- embed / transform


def _precomputed_table(cfg: PipelineConfig) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    pc = cfg.precomputed
    for p in (pc.embedding, pc.statistics, pc.prediction):
        if p is None:
            continue
        e = emb_mod.load_precomputed(cfg.resolve(p), pc.id_column)
        for oid, row in zip(e.obs_ids, e.coords):
            if oid in table and not np.array_equal(table[oid], row):
                raise DataError(f"precomputed coordinates disagree for observation {oid!r}")
            table[oid] = row
    return table


def _lookup(table: dict, ids) -> emb_mod.Embedding:
    missing = [o for o in ids if o not in table]
    if missing:
        raise DataError(f"no precomputed coordinates for observation {missing[0]!r}")
    return emb_mod.Embedding(np.array([table[o] for o in ids]), tuple(ids))


def stage_embed(cfg: PipelineConfig) -> dict:
    meta = _ingest(cfg)
    X = _features(meta["roles"]["embedding"], meta)
    if cfg.precomputed is not None:
        emb = _lookup(_precomputed_table(cfg), X.obs_ids)
        summary = {"backend": "precomputed"}
        model_path = cfg.out / "embedding_model.json"
        if model_path.exists():
            model_path.unlink()
    else:
        params = emb_mod.EmbedParams(**asdict(cfg.embedder), seed=cfg.seed)
        scaling = ScalingParams.from_dict(meta["scaling"]) if meta["scaling"] else None
        model, emb = emb_mod.fit(X, params, scaling)
        emb_mod.save_model(model, cfg.out / "embedding_model.json")
        summary = {
            "backend": "internal",
            "a": model.a,
            "b": model.b,
            "n_neighbors": params.n_neighbors,
            "n_epochs": params.epochs_for(X.n_obs),
            "graph_edges": int(model.graph.weights.nnz),
        }
    emb_mod.write_embedding_csv(cfg.out / "embedding.csv", emb)
    summary.update({"n_obs": emb.n_obs, "n_components": emb.n_components})
    return summary


def stage_transform(cfg: PipelineConfig) -> dict:
    meta = _ingest(cfg)
    train = _read_coords(_need(cfg.out / "embedding.csv", "embed"))
    summary = {}
    model = table = None
    for role in ("statistics", "prediction"):
        path = cfg.out / f"coords_{role}.csv"
        entry = _role(meta, role)
        if entry is None:
            if path.exists():
                path.unlink()
            continue
        if meta.get("aliases", {}).get(role) == "embedding":
            emb = train
            how = "same as embedding set"
        elif cfg.precomputed is not None:
            table = table or _precomputed_table(cfg)
            emb = _lookup(table, entry["obs_ids"])
            how = "precomputed"
        else:
            model = model or emb_mod.load_model(_need(cfg.out / "embedding_model.json", "embed"))
            emb = emb_mod.transform(model, _features(entry, meta))
            how = "projected"
        emb_mod.write_embedding_csv(path, emb)
        summary[role] = {"n_obs": emb.n_obs, "how": how}
    return summary


# ---------------------------------------------------------------- dls


def stage_dls(cfg: PipelineConfig) -> dict:
    train = _read_coords(_need(cfg.out / "embedding.csv", "embed"))
    stats = _read_coords(_need(cfg.out / "coords_statistics.csv", "transform"))
    _, norm = dls_mod.normalize_embedding(train.coords)
    space, res = dls_mod.build_dls(stats.coords, stats.obs_ids, norm, cfg.dls.overlap_target, cfg.dls.r_max, cfg.dls.binning)
    d = dls_mod.dls_to_dict(space)
    d["overlap_target"] = cfg.dls.overlap_target
    d["resolution_satisfied"] = res.satisfied if res is not None else True
    write_json(cfg.out / "dls.json", d)
    dls_mod.export_occupancy(space, cfg.out / "occupancy.csv", cfg.out / "occupancy.pgm")
    return {
        "R": space.R,
        "D": space.D,
        "n_obs": space.n_obs,
        "realized_overlap": d["realized_overlap"],
        "occupied_pixels": d["occupied_pixels"],
        "resolution_satisfied": d["resolution_satisfied"],
        "n_clamped": space.n_clamped,
    }


def _dls(cfg: PipelineConfig) -> dls_mod.DiscreteLatentSpace:
    return dls_mod.dls_from_dict(read_json(_need(cfg.out / "dls.json", "dls")))


# ---------------------------------------------------------------- map


def stat_targets(entry: dict) -> list[TargetVariable]:
    """Binary and continuous targets of a role; categorical columns expand one-vs-rest."""
    out = []
    ids = tuple(entry["obs_ids"])
    for col, t in entry["targets"].items():
        if t["kind"] == "categorical":
            for tv in binarize_target(t["values"], ids):
                out.append(TargetVariable(f"{col}={tv.name}", "binary", tv.values, ids))
        else:
            out.append(TargetVariable(col, t["kind"], np.asarray(t["values"], float), ids))
    return out


def resolve_target(keys: list[str], wanted: str) -> str:
    if wanted in keys:
        return wanted
    hits = [k for k in keys if "=" in k and k.split("=", 1)[1] == wanted]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise DataError(f"target {wanted!r} is ambiguous: {hits}")
    raise DataError(f"unknown target {wanted!r}; available: {keys}")


def stage_map(cfg: PipelineConfig, target: str | None = None, method: str | None = None) -> dict:
    meta = _ingest(cfg)
    space = _dls(cfg)
    if "statistics" in meta.get("aliases", {}):
        raise DataError("no statistics set configured: give datasets.statistics or a split with the statistics role")
    entry = _role(meta, "statistics")
    targets = {t.name: t for t in stat_targets(entry)}
    if not targets:
        raise DataError("the statistics set has no targets to map")
    keys = list(targets)
    if target is not None:
        chosen = [resolve_target(keys, target)]
    elif cfg.statmap.targets is not None:
        chosen = [resolve_target(keys, t) for t in cfg.statmap.targets]
    else:
        chosen = keys
    sigma = cfg.statmap.sigma if cfg.statmap.sigma is not None else stat_mod.default_sigma(space)
    index_path = cfg.out / "maps" / "index.json"
    index = read_json(index_path) if (target is not None and index_path.is_file()) else {}
    for key in chosen:
        tv = targets[key].aligned_to(space.obs_ids)
        m = (method or cfg.statmap.method).replace("-", "_")
        if m == "auto":
            m = "point_biserial" if tv.kind == "binary" else "pearson"
        cmap = stat_mod.correlation_map(space, sigma, tv, m)
        cs = stat_mod.extract_clusters(cmap, cfg.statmap.r_min, cfg.statmap.connectivity, cfg.statmap.min_pixels)
        s = slug(key)
        stat_mod.export_map(cmap, cfg.out / "maps" / f"{s}.csv", cfg.out / "maps" / f"{s}.pgm")
        cd = stat_mod.clusters_to_dict(cs)
        cd.update({"target": key, "method": m, "sigma": sigma, "defined_pixels": int(cmap.defined.sum())})
        write_json(cfg.out / "maps" / f"{s}.clusters.json", cd)
        index[key] = {"slug": s, "method": m, "sigma": sigma, "n_positive": cd["n_positive"], "n_negative": cd["n_negative"]}
    write_json(index_path, index)
    return {"sigma": sigma, "maps": {k: index[k] for k in sorted(index)}}


# ---------------------------------------------------------------- profile


def stage_profile(cfg: PipelineConfig) -> dict:
    meta = _ingest(cfg)
    space = _dls(cfg)
    index = read_json(_need(cfg.out / "maps" / "index.json", "map"))
    X = _features(_role(meta, "statistics"), meta)
    X = X.subset([X.obs_ids.index(o) for o in space.obs_ids]) if X.obs_ids != space.obs_ids else X
    summary = {}
    for key in sorted(index):
        s = index[key]["slug"]
        cs = stat_mod.clusters_from_dict(read_json(cfg.out / "maps" / f"{s}.clusters.json"))
        profiles, entries = [], []
        for cl in cs.clusters:
            try:
                prof = prof_mod.cluster_profile(cl, X, space, cfg.profiler.min_members, cfg.profiler.effect_threshold)
            except prof_mod.ProfileError as exc:
                entries.append({"cluster": cl.label, "status": "not profilable", "reason": str(exc)})
                continue
            profiles.append(prof)
            e = prof.summary()
            e["sign"] = "+" if cl.sign > 0 else "-"
            e["rmap_files"] = [
                str(Path(p).relative_to(cfg.out))
                for p in prof_mod.export_rmap(prof, cfg.out / "profiles" / s / cl.label)
            ]
            entries.append(e)
        prof_mod.write_profiles_csv(cfg.out / "profiles" / f"{s}.csv", profiles)
        write_json(cfg.out / "profiles" / f"{s}.json", {"target": key, "clusters": entries})
        ok = [p for p in profiles if p.sufficient]
        summary[key] = {
            "profiled": len(profiles),
            "sufficient_positive": sum(1 for p in ok if p.cluster_label.startswith("pos")),
            "sufficient_negative": sum(1 for p in ok if p.cluster_label.startswith("neg")),
            "insufficient": len(profiles) - len(ok),
            "not_profilable": sum(1 for e in entries if e.get("status") == "not profilable"),
        }
    return summary


# ---------------------------------------------------------------- train / predict


def _training_role(meta: dict) -> str:
    if meta["roles"]["embedding"]["targets"]:
        return "embedding"
    return "statistics"


def _task_for(kind: str, override: str) -> str:
    if override != "auto":
        return override
    return "regression" if kind == "continuous" else "classification"


def stage_train(cfg: PipelineConfig) -> dict:
    meta = _ingest(cfg)
    role = _training_role(meta)
    entry = _role(meta, role)
    if entry is None or not entry["targets"]:
        raise DataError("no targets available to train a predictor")
    coords_path = cfg.out / ("embedding.csv" if role == "embedding" else "coords_statistics.csv")
    coords = _read_coords(_need(coords_path, "embed" if role == "embedding" else "transform"))
    pos = {o: i for i, o in enumerate(coords.obs_ids)}
    X = coords.coords[[pos[o] for o in entry["obs_ids"]]]
    cols = cfg.predictor.targets if cfg.predictor.targets is not None else list(entry["targets"])
    fp = pred_mod.ForestParams(cfg.predictor.n_trees, cfg.predictor.max_depth, cfg.predictor.min_samples_leaf, cfg.predictor.mtry)
    summary = {"training_role": role, "models": {}}
    for col in cols:
        if col not in entry["targets"]:
            raise DataError(f"predictor target {col!r} not found in the {role} set")
        t = entry["targets"][col]
        task = _task_for(t["kind"], cfg.predictor.task)
        y = t["values"] if task == "classification" else np.asarray(t["values"], float)
        if task == "classification" and t["kind"] != "categorical":
            y = [str(int(v)) if float(v).is_integer() else str(v) for v in y]
        ens = pred_mod.train_cv(X, y, task, cfg.predictor.n_perms, cfg.predictor.k, cfg.seed, fp, cfg.threads)
        pred_mod.save_model(ens, cfg.out / "models" / f"{slug(col)}.json")
        summary["models"][col] = {
            "task": task,
            "n_train": int(X.shape[0]),
            "winner_permutation": ens.winner,
            "winner_global_score": float(ens.global_scores[ens.winner]),
            "mean_global_score": float(ens.global_scores.mean()),
            "degenerate_permutations": int(ens.degenerate.sum()),
        }
    return summary


def stage_predict(cfg: PipelineConfig) -> dict:
    meta = _ingest(cfg)
    train_summary = _load_summary(cfg, "train")
    if train_summary is None:
        raise StageOrderError("no trained models found: run train first (`latent-atlas train --config ...`)")
    entry = _role(meta, "prediction")
    if entry is None:
        raise DataError("no prediction set configured")
    coords = _read_coords(_need(cfg.out / "coords_prediction.csv", "transform"))
    summary = {}
    for col in sorted(train_summary["models"]):
        path = cfg.out / "models" / f"{slug(col)}.json"
        if not path.is_file():
            raise StageOrderError(f"model file {path.name} missing: run train first")
        ens = pred_mod.load_model(path)
        pred = ens.predict(coords.coords)
        lines = []
        if ens.task == "classification":
            proba = ens.predict_proba(coords.coords)
            lines.append(",".join(["obs_id", "prediction"] + [f"p_{c}" for c in ens.classes]))
            for oid, p, pr in zip(coords.obs_ids, pred, proba):
                lines.append(",".join([oid, p] + [repr(float(v)) for v in pr]))
        else:
            lines.append("obs_id,prediction")
            lines += [f"{oid},{float(v)!r}" for oid, v in zip(coords.obs_ids, pred)]
        atomic_write_text(cfg.out / "predictions" / f"{slug(col)}.csv", "\n".join(lines) + "\n")
        s = {"n": len(coords.obs_ids)}
        t = entry["targets"].get(col)
        if t is not None:
            pos = {o: i for i, o in enumerate(entry["obs_ids"])}
            truth = [t["values"][pos[o]] for o in coords.obs_ids]
            if ens.task == "classification" and t["kind"] != "categorical":
                truth = [str(int(v)) if float(v).is_integer() else str(v) for v in truth]
            metrics = pred_mod.evaluate(pred, truth, ens.task, ens.classes if ens.task == "classification" else None)
            write_json(cfg.out / "metrics" / f"{slug(col)}.json", metrics)
            s.update({k: metrics[k] for k in ("accuracy", "pearson_r", "rmse") if k in metrics})
        summary[col] = s
    return summary


# ---------------------------------------------------------------- report


def render_plots(cfg: PipelineConfig) -> list[str]:
    if not cfg.render.enabled:
        return []
    meta = _ingest(cfg)
    written = []
    train = _read_coords(_need(cfg.out / "embedding.csv", "embed"))
    if train.n_components != 2:
        atomic_write_text(cfg.out / "plots" / "NOTICE.txt", f"{train.n_components}-D embedding: raster/SVG renders need 2-D; see CSV outputs.\n")
        return ["plots/NOTICE.txt"]
    _, norm = dls_mod.normalize_embedding(train.coords)
    entry = meta["roles"]["embedding"]
    color, kind, title = None, "categorical", "embedding"
    cols = list(entry["targets"])
    if cfg.render.color_by is not None:
        if cfg.render.color_by not in entry["targets"]:
            raise DataError(f"render.color_by {cfg.render.color_by!r} is not a target of the embedding set")
        cols = [cfg.render.color_by]
    if cols:
        t = entry["targets"][cols[0]]
        color = t["values"]
        kind = "continuous" if t["kind"] == "continuous" else "categorical"
        title = f"embedding coloured by {cols[0]}"
    atomic_write_text(cfg.out / "plots" / "embedding.svg", scatter_svg(train.coords, color, kind, title, norm))
    written.append("plots/embedding.svg")
    index_path = cfg.out / "maps" / "index.json"
    if index_path.is_file() and (cfg.out / "dls.json").is_file():
        space = _dls(cfg)
        stats = _read_coords(cfg.out / "coords_statistics.csv")
        targets = {t.name: t for t in stat_targets(_role(meta, "statistics"))}
        for key, info in sorted(read_json(index_path).items()):
            cs = stat_mod.clusters_from_dict(read_json(cfg.out / "maps" / f"{info['slug']}.clusters.json"))
            tv = targets[key].aligned_to(stats.obs_ids)
            vals = [str(int(v)) for v in tv.values] if tv.kind == "binary" else tv.values
            svg = scatter_svg(stats.coords, vals, "categorical" if tv.kind == "binary" else "continuous",
                              f"{key}: {len(cs.positive())} positive / {len(cs.negative())} negative clusters",
                              space.norm, cs, space.R)
            atomic_write_text(cfg.out / "plots" / f"map_{info['slug']}.svg", svg)
            written.append(f"plots/map_{info['slug']}.svg")
    return written


def _versions() -> dict:
    import numba
    import scipy

    return {
        "latent_atlas": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def build_report(cfg: PipelineConfig, timings: dict | None = None, failure: dict | None = None) -> dict:
    stages = {}
    warn_list = []
    for s in STAGES[:-1]:
        summ = _load_summary(cfg, s)
        if summ is not None:
            stages[s] = summ
            warn_list += [f"[{s}] {w}" for w in summ.get("warnings", [])]
    clusters, profiles, metrics = {}, {}, {}
    index_path = cfg.out / "maps" / "index.json"
    if index_path.is_file():
        for key, info in sorted(read_json(index_path).items()):
            cd = read_json(cfg.out / "maps" / f"{info['slug']}.clusters.json")
            clusters[key] = {
                "method": cd["method"],
                "sigma": cd["sigma"],
                "n_positive": cd["n_positive"],
                "n_negative": cd["n_negative"],
                "clusters": [{k: c[k] for k in ("label", "sign", "size", "peak_r", "peak_p_uncorrected")} for c in cd["clusters"]],
            }
            pp = cfg.out / "profiles" / f"{info['slug']}.json"
            if pp.is_file():
                profiles[key] = read_json(pp)["clusters"]
                for e in profiles[key]:
                    if e.get("status") == "insufficient effect size":
                        warn_list.append(f"[profile] {key} cluster {e['cluster']}: insufficient effect size (max r {e['max_r']:.3f})")
    for p in sorted((cfg.out / "metrics").glob("*.json")) if (cfg.out / "metrics").is_dir() else []:
        metrics[p.stem] = read_json(p)
    if timings is None:
        tp = cfg.out / "timings.json"
        timings = read_json(tp) if tp.is_file() else {}
    report = {
        "status": "failed" if failure else "ok",
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_dict(),
        "versions": _versions(),
        "timings": timings,
        "stages": stages,
        "dls": stages.get("dls"),
        "clusters": clusters,
        "profiles": profiles,
        "prediction_metrics": metrics,
        "warnings": warn_list + STANDING_NOTES,
    }
    if failure:
        report.update(failure)
    return report


def stage_report(cfg: PipelineConfig) -> dict:
    _ingest(cfg)
    plots = render_plots(cfg)
    report = build_report(cfg)
    report["plots"] = plots
    write_json(cfg.out / "report.json", report)
    return report


# ---------------------------------------------------------------- drivers

STAGE_FUNCS = {
    "ingest": stage_ingest,
    "embed": stage_embed,
    "transform": stage_transform,
    "dls": stage_dls,
    "map": stage_map,
    "profile": stage_profile,
    "train": stage_train,
    "predict": stage_predict,
}


def run_stage(cfg: PipelineConfig, stage: str, **kwargs):
    """Run one stage, record its summary and warnings, and time it."""
    if stage == "report":
        return stage_report(cfg)
    fn = STAGE_FUNCS[stage]
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        summary = fn(cfg, **kwargs)
    msgs = []
    for w in caught:
        m = str(w.message)
        if m not in msgs and not issubclass(w.category, (DeprecationWarning, PendingDeprecationWarning)):
            msgs.append(m)
    summary = dict(summary, warnings=msgs)
    _write_summary(cfg, stage, summary)
    tp = cfg.out / "timings.json"
    timings = read_json(tp) if tp.is_file() else {}
    timings[stage] = round(time.perf_counter() - t0, 3)
    write_json(tp, timings)
    return summary


def active_stages(cfg: PipelineConfig) -> list[str]:
    """Stages that have inputs under this config, in execution order."""
    split_roles = set(cfg.split.test_roles) if cfg.split is not None else set()
    emb = cfg.datasets["embedding"]

    def source(role):
        if role in split_roles:
            return emb
        return cfg.datasets[role]

    stats = source("statistics")
    stages = ["ingest", "embed", "transform", "dls"]
    if stats is not None and stats.targets:
        stages += ["map", "profile"]
    pred = source("prediction")
    if pred is not None and (emb.targets or (stats is not None and stats.targets)):
        stages += ["train", "predict"]
    return stages + ["report"]


def run_pipeline(cfg: PipelineConfig, fresh: bool = True) -> dict:
    """Run every applicable stage; on failure write a partial report and raise."""
    out = cfg.out
    if fresh and out.exists():
        for name in ("stages", "maps", "profiles", "models", "predictions", "metrics", "plots"):
            if (out / name).is_dir():
                shutil.rmtree(out / name)
        for name in ("timings.json", "report.json", "coords_statistics.csv", "coords_prediction.csv", "embedding_model.json"):
            if (out / name).exists():
                (out / name).unlink()
    out.mkdir(parents=True, exist_ok=True)
    for stage in active_stages(cfg):
        try:
            if stage == "report":
                return stage_report(cfg)
            run_stage(cfg, stage)
        except BaseException as exc:
            if isinstance(exc, KeyboardInterrupt):
                raise
            report = build_report(cfg, failure={"failed_stage": stage, "error": f"{type(exc).__name__}: {exc}"})
            write_json(out / "report.json", report)
            raise StageFailure(stage, exc) from exc
    raise AssertionError("unreachable")
