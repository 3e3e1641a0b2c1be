"""Plain-text matrix files and tensor bundles.

A matrix file holds a ``rows cols`` header line followed by one line per
row of whitespace-separated values printed with 17 significant digits, which
round-trips float64 exactly.
"""

import json
from pathlib import Path

import numpy as np

from otat.numeric import ShapeError

__all__ = [
    "format_matrix",
    "parse_matrix",
    "write_matrix",
    "read_matrix",
    "write_bundle",
    "read_bundle",
]


def format_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"matrix files hold 2-D data, got shape {m.shape}")
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines.extend(" ".join(f"{v:.17g}" for v in row) for row in m)
    return "\n".join(lines) + "\n"


def parse_matrix(text):
    tokens = text.split()
    if len(tokens) < 2:
        raise ShapeError("matrix file is missing its 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = tokens[2:]
    if len(values) != rows * cols:
        raise ShapeError(f"header says {rows}x{cols} but file has {len(values)} values")
    return np.array([float(v) for v in values], dtype=np.float64).reshape(rows, cols)


def write_matrix(path, m):
    Path(path).write_text(format_matrix(m))


def read_matrix(path):
    return parse_matrix(Path(path).read_text())


def write_bundle(directory, tensors, extra=None):
    """Write named tensors as matrix files plus a ``manifest.json``.

    Tensors with more than two axes are flattened to ``(prod(leading), last)``;
    the manifest keeps the original shape so :func:`read_bundle` restores it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        flat = arr.reshape(1, 1) if arr.ndim == 0 else arr.reshape(-1, arr.shape[-1])
        filename = f"{name}.mat"
        write_matrix(directory / filename, flat)
        entries.append({"name": name, "file": filename, "shape": list(arr.shape)})
    manifest = {"tensors": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory / "manifest.json"


def read_bundle(directory):
    """Inverse of :func:`write_bundle`; returns ``(tensors, manifest)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        tensors[entry["name"]] = read_matrix(directory / entry["file"]).reshape(entry["shape"])
    return tensors, manifest
