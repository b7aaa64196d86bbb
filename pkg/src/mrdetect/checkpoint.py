"""Versioned checkpoint container shared by every trained model.

Layout: a safetensors file whose ``__metadata__`` holds exactly one key,
``mrdetect``, containing canonical JSON (sorted keys, no whitespace)::

    {"format": "mrdetect-ckpt", "version": 1, "kind": "<denoiser|gan|encoder|detector>",
     ...model-specific fields (architecture, schedule, seed, training config)...}

Tensor names are ``<module>.<parameter>``. A single metadata key keeps the file
byte-stable: safetensors does not order multiple metadata entries.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch
from safetensors import safe_open
from safetensors.torch import save_file

FORMAT = "mrdetect-ckpt"
VERSION = 1
_META_KEY = "mrdetect"


class CheckpointError(RuntimeError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path: str | Path) -> str:
    return digest_bytes(Path(path).read_bytes())


def flatten_state(modules: dict[str, torch.nn.Module | dict[str, torch.Tensor]]) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    for prefix, mod in modules.items():
        state = mod.state_dict() if isinstance(mod, torch.nn.Module) else mod
        for name, value in state.items():
            tensors[f"{prefix}.{name}"] = value.detach().cpu().contiguous().clone()
    return tensors


def unflatten_state(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}


def save_checkpoint(path: str | Path, kind: str, tensors: dict[str, torch.Tensor], header: dict[str, Any]) -> str:
    """Write a checkpoint; returns the sha256 of the written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(header)
    meta.update(format=FORMAT, version=VERSION, kind=kind)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata={_META_KEY: canonical_json(meta)})
    tmp.replace(path)
    return file_digest(path)


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
        tensors = {name: fh.get_tensor(name) for name in fh.keys()}
    if _META_KEY not in meta:
        raise CheckpointError(f"{path}: missing {_META_KEY!r} header")
    header = json.loads(meta[_META_KEY])
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    return tensors, header
