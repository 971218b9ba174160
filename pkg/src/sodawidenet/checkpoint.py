"""Checkpoint archive: one .npz file holding the config as JSON, a flat
name -> tensor map, and a schema version."""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .model import SODAWideNetPP

SCHEMA_VERSION = 1
_TENSOR_PREFIX = "tensor/"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: SODAWideNetPP, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "schema_version": np.int64(SCHEMA_VERSION),
        "config_json": np.frombuffer(model.config.to_json().encode(), dtype=np.uint8),
        "ablation_json": np.frombuffer(
            json.dumps(sorted(model.ablation)).encode(), dtype=np.uint8
        ),
    }
    for name, tensor in model.state_dict().items():
        arrays[_TENSOR_PREFIX + name] = tensor.detach().cpu().numpy()
    with path.open("wb") as f:
        np.savez(f, **arrays)


def _read_json_field(archive, key):
    return json.loads(bytes(archive[key]).decode())


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> SODAWideNetPP:
    """Rebuild a model from an archive.

    If `expected_config` is given (e.g. when resuming a run), a mismatch is an
    error that lists every differing field.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["schema_version"])
        if version != SCHEMA_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint schema {version} (expected {SCHEMA_VERSION})"
            )
        config = ModelConfig.from_dict(_read_json_field(archive, "config_json"))
        ablation = frozenset(_read_json_field(archive, "ablation_json"))
        if expected_config is not None:
            fields = expected_config.diff(config)
            if fields:
                raise CheckpointError(
                    "checkpoint config does not match: differing fields " + ", ".join(fields)
                )
        state = {
            name[len(_TENSOR_PREFIX):]: torch.from_numpy(archive[name].copy())
            for name in archive.files if name.startswith(_TENSOR_PREFIX)
        }
    model = SODAWideNetPP(config, ablation=ablation)
    model.load_state_dict(state)
    return model
