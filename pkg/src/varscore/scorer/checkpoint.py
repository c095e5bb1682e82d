"""Scorer checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive.  Every parameter tensor is
stored under its module path (``layers.0.message.0.ws.weight`` ...) with its
own shape and dtype; a ``__meta__`` entry holds UTF-8 JSON::

    {"format": "varscore-checkpoint", "version": 1,
     "feature_spec": {...}, "train_config": {...} | null,
     "params": ["embed.weight", ...], "extra": {...}}

Arrays are written raw, so save/load round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import ConfigurationError, FeatureSpec, GVPScorer
from .train import TrainConfig

FORMAT = "varscore-checkpoint"
VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(
    model: GVPScorer,
    path: str | os.PathLike,
    config: TrainConfig | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "feature_spec": model.spec.to_dict(),
        "train_config": config.to_dict() if config is not None else None,
        "params": list(state),
        "extra": extra or {},
    }
    entries = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    entries.update(state)

    # fixed timestamps keep identical models byte-identical on disk
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, array in entries.items():
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_ZIP_DATE), _npy_bytes(array))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[GVPScorer, dict]:
    """Rebuild the scorer stored at ``path``; returns ``(model, meta)``."""
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive.files:
            raise ConfigurationError(f"{path}: not a scorer checkpoint")
        meta = json.loads(archive["__meta__"].tobytes().decode())
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise ConfigurationError(
                f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}"
            )
        state = {name: torch.from_numpy(archive[name].copy()) for name in meta["params"]}
    model = GVPScorer(FeatureSpec(**meta["feature_spec"]))
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    missing = set(model.state_dict()) ^ set(state)
    if missing:
        raise ConfigurationError(f"{path}: parameter set does not match feature spec: {sorted(missing)[:5]}")
    for name, tensor in model.state_dict().items():
        if tuple(tensor.shape) != tuple(state[name].shape):
            raise ConfigurationError(
                f"{path}: {name} has shape {tuple(state[name].shape)}, expected {tuple(tensor.shape)}"
            )
    model.load_state_dict(state)
    model.eval()
    return model, meta


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
