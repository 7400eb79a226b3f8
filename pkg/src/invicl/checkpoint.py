"""Versioned checkpoint container: config, named weights and RNG state in one ``.npz``."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .model import ICLTransformer, ModelConfig

FORMAT = "invicl-checkpoint"
VERSION = 1


class CheckpointError(IOError):
    pass


def atomic_write(path: str | os.PathLike, write) -> None:
    """Call ``write(fileobj)`` on a temp file beside ``path``, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model: ICLTransformer, meta: dict | None = None, rng_state: dict | None = None) -> None:
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.cfg.to_dict(),
        "dtype": str(model.dtype).replace("torch.", ""),
        "meta": meta or {},
        "rng_state": rng_state,
    }
    arrays = {f"w/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    atomic_write(path, lambda fh: np.savez(fh, **arrays))


def load_checkpoint(path) -> tuple[ICLTransformer, dict]:
    """Rebuild the model; returns it together with the decoded header."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            weights = {k[2:]: data[k] for k in data.files if k.startswith("w/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {header.get('version')} unsupported (want {VERSION})")
    cfg = ModelConfig(**header["config"])
    model = ICLTransformer(cfg).to(getattr(torch, header["dtype"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in weights.items()})
    return model, header
