"""Checkpoint format: ``checkpoint.bin`` holds every array as little-endian
float32, back to back; ``checkpoint.json`` lists names, shapes and offsets plus
the run state needed to resume bit-exactly."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .fields import NetConfig, SVEField
from .sampler import RegionWeights

BLOB = "checkpoint.bin"
MANIFEST = "checkpoint.json"


def _rng_hash(state) -> str:
    return hashlib.sha256(json.dumps(state, sort_keys=True).encode()).hexdigest()[:16]


def _write_blob(path, arrays):
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in arrays:
            a = np.asarray(arr, dtype="<f4")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    return entries


def _read_blob(path, entries) -> dict:
    data = np.fromfile(path, dtype="<f4")
    out = {}
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        out[e["name"]] = data[e["offset"]:e["offset"] + n].reshape(e["shape"])
    return out


def save_checkpoint(trainer, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model, opt = trainer.model, trainer.optimizer
    arrays, opt_steps = [], {}
    for name, p in model.named_parameters():
        arrays.append((name, p.detach().cpu().numpy()))
    for name, p in model.named_parameters():
        st = opt.state.get(p)
        if st:
            arrays.append(("adam.exp_avg." + name, st["exp_avg"].cpu().numpy()))
            arrays.append(("adam.exp_avg_sq." + name, st["exp_avg_sq"].cpu().numpy()))
            opt_steps[name] = float(st["step"])
    entries = _write_blob(directory / BLOB, arrays)
    rng_state = trainer.rng.bit_generator.state
    manifest = {
        "format": 1,
        "net_config": model.cfg.to_dict(),
        "train_config": trainer.config.to_dict(),
        "config_hash": trainer.config.config_hash(),
        "dataset_hash": trainer.dataset.manifest.scene_hash,
        "step": trainer.step,
        "stage": trainer.stage_at(max(trainer.step - 1, 0)),
        "inv_std": float(model.inv_std.detach()),
        "arrays": entries,
        "optimizer_steps": opt_steps,
        "rng_state": rng_state,
        "rng_state_hash": _rng_hash(rng_state),
        "sampler": trainer.weights.to_dict(),
        "frame_order": list(trainer._order),
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory / MANIFEST


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_model(directory, dtype=torch.float32) -> SVEField:
    """Rebuild the field stored in a checkpoint directory."""
    manifest = read_manifest(directory)
    model = SVEField(NetConfig(**manifest["net_config"]))
    arrays = _read_blob(Path(directory) / BLOB, manifest["arrays"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[name].copy()))
    return model.to(dtype)


def load_checkpoint(trainer, directory):
    from .trainer import CheckpointMismatch

    manifest = read_manifest(directory)
    if manifest["config_hash"] != trainer.config.config_hash():
        raise CheckpointMismatch(
            f"config hash mismatch: checkpoint {manifest['config_hash']} vs run {trainer.config.config_hash()}")
    if manifest["dataset_hash"] != trainer.dataset.manifest.scene_hash:
        raise CheckpointMismatch("config hash mismatch: checkpoint was trained on a different dataset")
    arrays = _read_blob(Path(directory) / BLOB, manifest["arrays"])
    model, opt = trainer.model, trainer.optimizer
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[name].copy()))
    opt.state.clear()
    for name, p in model.named_parameters():
        if name in manifest["optimizer_steps"]:
            opt.state[p] = {
                "step": torch.tensor(manifest["optimizer_steps"][name], dtype=torch.float32),
                "exp_avg": torch.from_numpy(arrays["adam.exp_avg." + name].copy()),
                "exp_avg_sq": torch.from_numpy(arrays["adam.exp_avg_sq." + name].copy()),
            }
    trainer.rng.bit_generator.state = manifest["rng_state"]
    trainer.weights = RegionWeights.from_dict(manifest["sampler"])
    trainer.step = manifest["step"]
    trainer._order = list(manifest["frame_order"])
    return trainer
