"""Single-file checkpoint container: named arrays plus JSON metadata.

Built on the safetensors layout (JSON header + raw little-endian buffers),
which is deterministic, so save -> load -> save is byte-identical.
"""
import json
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load as st_load
from safetensors.numpy import save as st_save

from .errors import CorruptCheckpoint, IncompatibleCheckpoint

__all__ = [
    "CHECKPOINT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "module_arrays",
    "load_module_arrays",
    "optimizer_arrays",
    "load_optimizer_arrays",
]

CHECKPOINT_VERSION = 1
_META_KEY = "ulfbridge"


def save_checkpoint(path, arrays, metadata):
    """Write ``arrays`` (name -> ndarray) and JSON-able ``metadata`` to ``path``."""
    meta = dict(metadata)
    meta.setdefault("version", CHECKPOINT_VERSION)
    arrays = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    blob = st_save(arrays, metadata={_META_KEY: json.dumps(meta, sort_keys=True)})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def _read_header(blob):
    if len(blob) < 8:
        raise CorruptCheckpoint("file too short")
    n = int.from_bytes(blob[:8], "little")
    if n <= 0 or 8 + n > len(blob):
        raise CorruptCheckpoint("bad header length")
    try:
        return json.loads(blob[8:8 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"unreadable header: {exc}") from exc


def load_checkpoint(path):
    """Return ``(arrays, metadata)``; checks the container version."""
    blob = Path(path).read_bytes()
    header = _read_header(blob)
    raw_meta = header.get("__metadata__", {}).get(_META_KEY)
    if raw_meta is None:
        raise CorruptCheckpoint("missing metadata block")
    try:
        meta = json.loads(raw_meta)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"metadata is not JSON: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(
            f"checkpoint version {meta.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    try:
        arrays = dict(st_load(blob))
    except Exception as exc:  # safetensors raises its own error types
        raise CorruptCheckpoint(f"cannot decode tensors: {exc}") from exc
    return arrays, meta


def module_arrays(prefix, module):
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays, prefix):
    keys = [k for k in arrays if k.startswith(prefix + "/")]
    state = {k[len(prefix) + 1:]: torch.from_numpy(arrays[k].copy()) for k in keys}
    module.load_state_dict(state, strict=True)


def optimizer_arrays(prefix, optimizer):
    """Split an optimizer state dict into arrays and a JSON-able remainder."""
    sd = optimizer.state_dict()
    arrays, scalars = {}, {}
    for idx, entry in sd["state"].items():
        for key, val in entry.items():
            if torch.is_tensor(val):
                arrays[f"{prefix}/{idx}/{key}"] = val.detach().cpu().numpy().copy()
            else:
                scalars[f"{idx}/{key}"] = val
    return arrays, {"param_groups": sd["param_groups"], "scalars": scalars}


def load_optimizer_arrays(optimizer, arrays, prefix, meta):
    state = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        idx, key = name[len(prefix) + 1:].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    for name, val in meta.get("scalars", {}).items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = val
    groups = [dict(g) for g in meta["param_groups"]]
    for g in groups:
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
    optimizer.load_state_dict({"state": state, "param_groups": groups})
