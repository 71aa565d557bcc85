"""Versioned key->array checkpoint container.

A checkpoint is a zip archive of ``<key>.npy`` entries (so ``numpy.load``
can open it like an ``.npz``) plus a ``meta.json`` entry carrying the format
version, the network configuration records, and the training iteration.
Entry timestamps are pinned, so identical contents give identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import ConfigurationError
from .generator import GeneratorConfig, RecurrentUNet

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_META_ENTRY = "meta.json"


def write_arrays(path: Path | str, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(meta)
    payload["format_version"] = FORMAT_VERSION
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr(
            zipfile.ZipInfo(_META_ENTRY, date_time=_EPOCH),
            json.dumps(payload, indent=2, sort_keys=True),
        )
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[key]))
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=_EPOCH), buf.getvalue())
    return path


def read_arrays(path: Path | str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
        if _META_ENTRY not in names:
            raise ConfigurationError(f"not a checkpoint (no {_META_ENTRY}): {path}")
        meta = json.loads(zf.read(_META_ENTRY))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError(
                f"unsupported checkpoint format {meta.get('format_version')!r} in {path}"
            )
        for name in names - {_META_ENTRY}:
            arrays[name[: -len(".npy")]] = np.load(io.BytesIO(zf.read(name)))
    return meta, arrays


def _state_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {
        k[len(prefix) + 1 :]: torch.from_numpy(v)
        for k, v in arrays.items()
        if k.startswith(prefix + "/")
    }
    module.load_state_dict(state)


def save_checkpoint(
    path: Path | str,
    generator: RecurrentUNet,
    iteration: int = 0,
    extra_modules: dict[str, torch.nn.Module] | None = None,
    extra_meta: dict[str, Any] | None = None,
    extra_arrays: dict[str, np.ndarray] | None = None,
) -> Path:
    """Persist the generator (and optionally discriminators etc.) to one file."""
    arrays = _state_arrays("generator", generator)
    meta: dict[str, Any] = {
        "iteration": iteration,
        "generator_config": generator.config.to_dict(),
        "modules": ["generator"],
    }
    if extra_modules:
        for name, module in extra_modules.items():
            arrays.update(_state_arrays(name, module))
            meta["modules"].append(name)
    if extra_meta:
        meta.update(extra_meta)
    if extra_arrays:
        arrays.update(extra_arrays)
    return write_arrays(path, arrays, meta)


def load_generator(path: Path | str) -> tuple[RecurrentUNet, dict[str, Any]]:
    """Rebuild the generator recorded in a checkpoint. Returns (model, meta)."""
    meta, arrays = read_arrays(path)
    model = RecurrentUNet(GeneratorConfig.from_dict(meta["generator_config"]))
    _load_state("generator", model, arrays)
    model.eval()
    return model, meta


def load_module_state(path: Path | str, name: str, module: torch.nn.Module) -> None:
    """Load one named module's parameters from a checkpoint into ``module``."""
    meta, arrays = read_arrays(path)
    if name not in meta.get("modules", []):
        raise ConfigurationError(f"checkpoint has no module {name!r}: {path}")
    _load_state(name, module, arrays)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer):
    """Flatten an optimizer's state into arrays plus a JSON-able skeleton."""
    state_dict = optimizer.state_dict()
    arrays: dict[str, np.ndarray] = {}
    skeleton: dict[str, Any] = {"param_groups": state_dict["param_groups"], "state": {}}
    for idx, entries in state_dict["state"].items():
        skeleton["state"][str(idx)] = {}
        for key, value in entries.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}/{idx}/{key}"] = value.detach().cpu().numpy()
                skeleton["state"][str(idx)][key] = "__array__"
            else:
                skeleton["state"][str(idx)][key] = value
    return arrays, skeleton


def load_optimizer_state(
    prefix: str,
    optimizer: torch.optim.Optimizer,
    arrays: dict[str, np.ndarray],
    skeleton: dict[str, Any],
) -> None:
    state: dict[int, dict] = {}
    for idx_str, entries in skeleton["state"].items():
        idx = int(idx_str)
        state[idx] = {}
        for key, value in entries.items():
            if value == "__array__":
                state[idx][key] = torch.from_numpy(arrays[f"{prefix}/{idx}/{key}"].copy())
            else:
                state[idx][key] = value
    optimizer.load_state_dict({"param_groups": skeleton["param_groups"], "state": state})
