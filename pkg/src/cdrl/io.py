"""CSV helpers: '.' decimal separator, '\n' line endings."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def write_csv(path, data: np.ndarray, header: list[str] | None = None) -> None:
    data = np.atleast_2d(np.asarray(data))
    if header is None:
        header = [f"x{i}" for i in range(data.shape[1])]
    lines = [",".join(header)]
    for row in data:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_csv(path, dtype=np.float64) -> np.ndarray:
    """Read a numeric CSV with a single header row."""
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if len(text) < 2:
        raise ValueError(f"{path}: no data rows")
    rows = [[v.strip() for v in line.split(",")] for line in text[1:] if line.strip()]
    width = len(text[0].split(","))
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: ragged rows")
    if dtype is bool:
        return np.array([[v.lower() in ("1", "true") for v in r] for r in rows], dtype=bool)
    return np.array(rows, dtype=dtype)


def write_manifest(out_path, payload: dict) -> Path:
    path = Path(str(out_path) + ".manifest.json")
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path
