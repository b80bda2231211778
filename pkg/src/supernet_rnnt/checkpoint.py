"""Checkpoint directories: manifest.json, raw float64 tensors, mask files.

Layout::

    <dir>/manifest.json
    <dir>/params/<name>.f64     little-endian float64, row-major
    <dir>/masks/<name>.mask     JSON header line + packed block bitmap
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError
from .sparsity import BlockMask

FORMAT_VERSION = 1


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(blob: bytes, shape) -> np.ndarray:
    arr = np.frombuffer(blob, dtype="<f8")
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"tensor payload has {arr.size} values, shape {shape} needs more or fewer")
    return arr.reshape(shape).astype(np.float64)


def write_tensor(path: Path, arr: np.ndarray) -> dict:
    path = Path(path)
    path.write_bytes(tensor_to_bytes(arr))
    return {"file": path.name, "shape": list(arr.shape), "dtype": "float64", "byteorder": "little"}


def read_tensor(path: Path, shape) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), shape)


def save_checkpoint(
    directory: str | Path,
    params: dict[str, np.ndarray],
    masks: dict[str, BlockMask] | None = None,
    step: int = 0,
    metrics: dict | None = None,
    schedule_state: dict | None = None,
    extra: dict | None = None,
) -> Path:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    layers = []
    for name, arr in params.items():
        info = write_tensor(d / "params" / f"{name}.f64", np.asarray(arr))
        layers.append({"name": name, **info})
    mask_entries = []
    if masks:
        (d / "masks").mkdir(exist_ok=True)
        for name, m in masks.items():
            m.save(d / "masks" / f"{name}.mask")
            mask_entries.append({"name": name, "file": f"{name}.mask", "sparsity": m.sparsity, "frozen": m.frozen})
    manifest: dict[str, Any] = {
        "format": FORMAT_VERSION,
        "step": step,
        "layers": layers,
        "masks": mask_entries,
        "metrics": metrics or {},
        "schedule_state": schedule_state or {},
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_manifest(directory: str | Path) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, BlockMask], dict]:
    d = Path(directory)
    manifest = load_manifest(d)
    params = {}
    for entry in manifest["layers"]:
        try:
            params[entry["name"]] = read_tensor(d / "params" / entry["file"], entry["shape"])
        except OSError as exc:
            raise CheckpointError(str(exc)) from None
    masks = {}
    for entry in manifest.get("masks", []):
        try:
            masks[entry["name"]] = BlockMask.load(d / "masks" / entry["file"])
        except OSError as exc:
            raise CheckpointError(str(exc)) from None
    return params, masks, manifest


def resolve_pointer(run_dir: str | Path, which: str) -> Path:
    """Follow a ``best_streaming`` / ``best_nonstreaming`` pointer file."""
    run_dir = Path(run_dir)
    ptr = run_dir / which
    if not ptr.exists():
        raise CheckpointError(f"no pointer file {ptr}")
    return run_dir / ptr.read_text().strip()
