"""Checkpoint container: a portable ``.npz`` archive of named parameter
and buffer arrays plus a JSON config snapshot, epoch counter and RNG
state. Loading restores forward outputs bit-exactly on the same device
and precision."""

from __future__ import annotations

import json

import numpy as np
import torch

FORMAT_VERSION = 1


def save_checkpoint(path, model: torch.nn.Module, config: dict,
                    epoch: int = 0) -> None:
    arrays = {
        "__meta__": np.frombuffer(json.dumps({
            "version": FORMAT_VERSION,
            "epoch": int(epoch),
            "config": config,
        }).encode("utf-8"), dtype=np.uint8),
        "__torch_rng__": torch.get_rng_state().numpy(),
    }
    for name, tensor in model.state_dict().items():
        arrays["state/" + name] = tensor.detach().cpu().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict:
    """Returns {"config", "epoch", "state_dict", "torch_rng"}."""
    with np.load(path) as archive:
        meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        state = {}
        for key in archive.files:
            if key.startswith("state/"):
                state[key[len("state/"):]] = torch.from_numpy(archive[key].copy())
        rng = torch.from_numpy(archive["__torch_rng__"].copy())
    return {"config": meta["config"], "epoch": meta["epoch"],
            "state_dict": state, "torch_rng": rng}


def restore_model(payload: dict, model: torch.nn.Module,
                  restore_rng: bool = False) -> torch.nn.Module:
    model.load_state_dict(payload["state_dict"])
    if restore_rng:
        torch.set_rng_state(payload["torch_rng"].to(torch.uint8))
    return model
