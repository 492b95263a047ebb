"""Checkpoint archives.

A checkpoint is an uncompressed zip holding one MTEN file per tensor plus a
``state.json`` with the scalar training state. Tensor groups are prefixed
``model/``, ``optim/`` and ``freq/``.
"""
from __future__ import annotations

import hashlib
import json
import os
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import mten

FORMAT = "mscg-checkpoint/1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    freq: np.ndarray
    state: dict          # iteration, freq_t, phase, step_count, rng, config, config_hash

    @property
    def iteration(self) -> int:
        return int(self.state["iteration"])

    @property
    def config_text(self) -> str:
        return self.state["config"]


def tensors_digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(mten.dumps(arrays[name]))
    return h.hexdigest()


def save(path, ckpt: Checkpoint) -> Path:
    """Write atomically: the archive only replaces ``path`` once complete."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    manifest = {}
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for prefix, arrays in (("model", ckpt.model), ("optim", ckpt.optimizer), ("freq", {"f": ckpt.freq})):
            for name in sorted(arrays):
                arr = np.asarray(arrays[name])
                key = f"{prefix}/{name}.mten"
                zf.writestr(key, mten.dumps(arr))
                manifest[key] = {"shape": list(arr.shape), "dtype": arr.dtype.name}
        state = dict(ckpt.state, format=FORMAT, model_digest=tensors_digest(ckpt.model))
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("state.json", json.dumps(state, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: cannot open checkpoint ({exc})") from None
    groups: dict[str, dict[str, np.ndarray]] = {"model": {}, "optim": {}, "freq": {}}
    with zf:
        names = set(zf.namelist())
        if "state.json" not in names:
            raise CheckpointError(f"{path}: missing state.json")
        state = json.loads(zf.read("state.json"))
        if state.get("format") != FORMAT:
            raise CheckpointError(f"{path}: unsupported checkpoint format {state.get('format')!r}")
        for key in sorted(names):
            if not key.endswith(".mten"):
                continue
            prefix, name = key.split("/", 1)
            if prefix not in groups:
                raise CheckpointError(f"{path}: unexpected entry {key}")
            try:
                groups[prefix][name[: -len(".mten")]] = mten.loads(zf.read(key))
            except mten.MtenError as exc:
                raise CheckpointError(f"{path}: {key}: {exc}") from None
    if tensors_digest(groups["model"]) != state.get("model_digest"):
        raise CheckpointError(f"{path}: model tensors do not match the recorded digest")
    return Checkpoint(groups["model"], groups["optim"], groups["freq"]["f"], state)
