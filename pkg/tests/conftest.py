import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "scripts"))
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    """Digits CSV + default config (100 permutations) in a fresh directory."""
    from export_digits import export

    d = tmp_path_factory.mktemp("digits")
    export(d, seed=0, n_perms=100)
    return d


@pytest.fixture(scope="session")
def digits_run(digits_dir):
    """One full default pipeline run over digits, shared by the slow tests."""
    import time

    from latent_atlas.config import load_config
    from latent_atlas.pipeline import run_pipeline

    cfg = load_config(digits_dir / "config.json")
    t0 = time.perf_counter()
    report = run_pipeline(cfg)
    return {"cfg": cfg, "report": report, "seconds": time.perf_counter() - t0, "out": cfg.out}


ACCEPTANCE: dict[int, str] = {}


class _Verdict:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, etype, exc, tb):
        status = "PASS" if etype is None else "FAIL"
        why = self.detail if etype is None else (self.detail + "; " if self.detail else "") + f"{etype.__name__}: {exc}".strip()
        line = f"criterion {self.number:2d} [{status}] {self.title}: {why}"
        ACCEPTANCE[self.number] = line
        print(line)
        return False


@pytest.fixture
def verdict():
    return _Verdict


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
