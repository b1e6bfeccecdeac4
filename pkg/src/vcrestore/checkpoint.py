"""Self-describing checkpoint container (config, parameter blobs, step, seed, training stage)."""

from __future__ import annotations

from pathlib import Path

import torch

FORMAT = "vcrestore-checkpoint/1"


class ModelError(RuntimeError):
    pass


def save(path, *, kind, config, modules, step, seed, stage=None, optimizer=None, metadata=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "kind": kind,
        "stage": stage,
        "config": config,
        "modules": {k: {n: v.detach().clone() for n, v in sd.items()} for k, sd in modules.items()},
        "optimizer": optimizer,
        "step": int(step),
        "seed": int(seed),
        "metadata": metadata or {},
    }
    torch.save(payload, path)
    return path


def load(path, kind=None, stage=None) -> dict:
    path = Path(path)
    if not path.exists():
        raise ModelError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - surface any unpickling failure as a model error
        raise ModelError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ModelError(f"{path} is not a {FORMAT} checkpoint")
    if kind is not None and payload["kind"] != kind:
        raise ModelError(f"{path} holds a {payload['kind']!r} model, expected {kind!r}")
    if stage is not None and payload["stage"] != stage:
        raise ModelError(
            f"{path} was trained at stage {payload['stage']!r}, but stage {stage!r} is required"
        )
    return payload
