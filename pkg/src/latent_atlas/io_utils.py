"""Small file-format helpers shared by every stage.

All writers go through :func:`atomic_write_bytes` so a crashed run never
leaves a half-written artifact behind.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any

import numpy as np


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj: Any) -> str:
    # sorted keys + fixed separators keep the bytes stable across runs
    return json.dumps(obj, sort_keys=True, indent=1, separators=(",", ": "), allow_nan=False) + "\n"


def write_json(path, obj: Any) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def fmt_float(x: float) -> str:
    """Shortest text that round-trips to the same float64."""
    return repr(float(x))


def encode_array(a: np.ndarray) -> dict:
    """Bit-exact JSON encoding of a numeric array (little-endian, base64)."""
    a = np.ascontiguousarray(a)
    dt = a.dtype.newbyteorder("<")
    return {
        "dtype": dt.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.astype(dt, copy=False).tobytes()).decode("ascii"),
    }


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"])
    return a.astype(a.dtype.newbyteorder("="), copy=True)


def checksum(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def pgm_bytes(img: np.ndarray) -> bytes:
    """Binary 8-bit PGM (P5). Row 0 of ``img`` is the top of the image."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    # exactly one whitespace byte separates the header from the pixels
    return np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)


def write_pgm(path, img: np.ndarray) -> None:
    atomic_write_bytes(path, pgm_bytes(img))


def grid_to_image(grid: np.ndarray) -> np.ndarray:
    """Map a grid indexed [x, y] to image rows (y up, so flip vertically)."""
    return np.flipud(np.asarray(grid).T)
