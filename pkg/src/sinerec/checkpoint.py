"""Versioned single-file model archive.

Layout::

    SINE1\\n
    <header byte length>\\n
    <JSON header: model config, vocabularies, array names and shapes>\\n
    <float64 little-endian values of each array, in header order>

JSON keys are sorted so equal models produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, ModelParams

MAGIC = b"SINE1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: ModelParams, user_ids: list[str], item_ids: list[str]) -> None:
    names = list(params.tensors)
    header = {
        "format": "SINE1",
        "config": params.config.as_dict(),
        "vocab": {"users": list(user_ids), "items": list(item_ids)},
        "arrays": [{"name": k, "shape": list(params[k].shape)} for k in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(blob)}\n".encode("ascii"))
        fh.write(blob)
        fh.write(b"\n")
        for k in names:
            fh.write(np.ascontiguousarray(params[k].data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Return the parameters and the ``{"users": [...], "items": [...]}`` vocabularies."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a SINE1 checkpoint")
        try:
            size = int(fh.readline().decode("ascii"))
            header = json.loads(fh.read(size).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc
        fh.read(1)
        tensors = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated data for {spec['name']}")
            tensors[spec["name"]] = ad.parameter(np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), spec["name"])
    config = ModelConfig(**header["config"])
    return ModelParams(config, tensors), header["vocab"]
