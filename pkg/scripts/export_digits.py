"""Export the 8x8 handwritten digits set as a CSV plus a ready-to-run config.

Usage: python3 scripts/export_digits.py [OUT_DIR] [--seed N] [--n-perms N]
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from sklearn.datasets import load_digits


def export(out_dir: Path, seed: int = 0, n_perms: int = 100) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    d = load_digits()
    header = ["id"] + [f"px{i}" for i in range(64)] + ["label"]
    lines = [",".join(header)]
    for i, (row, y) in enumerate(zip(d.data, d.target)):
        lines.append(",".join([f"d{i:04d}"] + [str(int(v)) for v in row] + [str(int(y))]))
    (out_dir / "digits.csv").write_text("\n".join(lines) + "\n")
    cfg = {
        "seed": seed,
        "output_dir": "out",
        "datasets": {
            "embedding": {
                "path": "digits.csv",
                "id_column": "id",
                "tensor_shape": [8, 8],
                "targets": {"label": "categorical"},
            }
        },
        "split": {"test_fraction": 0.2, "test_roles": ["statistics", "prediction"]},
        "embedder": {"n_neighbors": 15, "min_dist": 0.1},
        "predictor": {"n_perms": n_perms, "k": 5, "n_trees": 100},
    }
    path = out_dir / "config.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return path


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", nargs="?", default="digits_run")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-perms", type=int, default=100)
    a = ap.parse_args()
    print(export(Path(a.out_dir), a.seed, a.n_perms))
