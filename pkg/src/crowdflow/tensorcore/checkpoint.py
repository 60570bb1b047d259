"""Checkpoint archive: named parameter blocks plus a version header.

The container is a numpy .npz (zip of row-major .npy blocks), which keeps
float64 payloads bit-exact across a save/load round trip.  A JSON header
under the reserved ``__meta__`` key records the format version and an
optional model-config echo.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

FORMAT_VERSION = 1
_META_KEY = "__meta__"

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]


def save_checkpoint(path, params: dict, config: dict | None = None):
    path = Path(path)
    blocks = {}
    for name, p in params.items():
        if name == _META_KEY:
            raise ValueError(f"parameter name {_META_KEY!r} is reserved")
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        blocks[name] = np.ascontiguousarray(arr)
    meta = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config}, sort_keys=True
    )
    blocks[_META_KEY] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **blocks)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Returns (parameter arrays, config echo or None)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as archive:
        if _META_KEY not in archive:
            raise ValueError(f"{path} is not a checkpoint archive (missing header)")
        meta = json.loads(bytes(archive[_META_KEY]).decode("utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format version {version!r}, "
                f"expected {FORMAT_VERSION}"
            )
        params = {k: archive[k] for k in archive.files if k != _META_KEY}
    return params, meta.get("config")
