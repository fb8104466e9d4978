import json

import pytest

from latent_atlas.config import ConfigError, config_from_dict, load_config


@pytest.fixture
def base(tmp_path):
    (tmp_path / "d.csv").write_text("id,f\na,1\n")
    return {"seed": 1, "datasets": {"embedding": {"path": "d.csv"}}}, tmp_path


def test_minimal_config_gets_embedder_defaults(base):
    data, d = base
    cfg = config_from_dict(data, d)
    assert cfg.embedder.n_neighbors == 15 and cfg.precomputed is None
    assert cfg.statmap.r_min == 0.2 and cfg.predictor.n_perms == 100 and cfg.predictor.k == 5
    assert cfg.out == d / "out"


@pytest.mark.parametrize("mutate, msg", [
    (lambda c: c.update(sed=3), "unknown top-level"),
    (lambda c: c.pop("seed"), "seed"),
    (lambda c: c.update(seed="7"), "seed"),
    (lambda c: c["datasets"]["embedding"].update(pth="x"), "unknown key"),
    (lambda c: c.update(statmap={"rmin": 0.3}), "unknown key"),
    (lambda c: c["datasets"].update(test={"path": "d.csv"}), "unknown role"),
    (lambda c: c.update(precomputed={"embedding": "d.csv"}, embedder={}), "exactly one"),
    (lambda c: c["datasets"]["embedding"].update(path="missing.csv"), "not found"),
    (lambda c: c.update(split={"test_fraction": 1.5}), "test_fraction"),
    (lambda c: c.update(dls={"binning": "round"}), "binning"),
    (lambda c: c.update(statmap={"connectivity": 6}), "connectivity"),
    (lambda c: c["datasets"]["embedding"].update(targets={"y": "ordinal"}), "kind"),
    (lambda c: c.update(split={}, datasets={"embedding": {"path": "d.csv"}, "statistics": {"path": "d.csv"}}), "cannot be given"),
])
def test_config_errors(base, mutate, msg):
    data, d = base
    mutate(data)
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(data, d)


def test_env_overrides_only_out_and_threads(base, monkeypatch):
    data, d = base
    (d / "c.json").write_text(json.dumps(data))
    monkeypatch.setenv("LATENT_ATLAS_OUT", str(d / "elsewhere"))
    monkeypatch.setenv("LATENT_ATLAS_THREADS", "3")
    cfg = load_config(d / "c.json")
    assert cfg.out == d / "elsewhere" and cfg.threads == 3
    cfg = load_config(d / "c.json", out_override=str(d / "cli"), threads_override=2)
    assert cfg.out == d / "cli" and cfg.threads == 2


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "c.json")


def test_echo_contains_every_section(base):
    data, d = base
    echo = config_from_dict(data, d).to_dict()
    for key in ("seed", "datasets", "scaling", "embedder", "dls", "statmap", "profiler", "predictor", "render", "threads"):
        assert key in echo
    json.dumps(echo)
