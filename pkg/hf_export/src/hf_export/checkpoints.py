"""Resolve a named 2-D tensor out of a model checkpoint.

Supported containers: torch pickles (.pt/.bin/.ckpt, loaded with
weights_only), safetensors files, and numpy .npz archives. A directory is
scanned for the first file of those kinds that contains the requested
tensor. A non-path argument is treated as a hub repo id and resolved via
huggingface_hub when that package is available.

Tensor names are looked up directly, then under a top-level "state_dict"
key, then by dotted traversal into nested mappings.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import numpy as np

_CHECKPOINT_SUFFIXES = (".safetensors", ".pt", ".bin", ".ckpt", ".npz")


class TensorNotFound(KeyError):
    pass


def _to_array(value: Any) -> np.ndarray:
    if isinstance(value, np.ndarray):
        return np.asarray(value, dtype=np.float64)
    # torch tensors (and anything else with .detach/.cpu/.numpy)
    for attr in ("detach", "cpu"):
        if hasattr(value, attr):
            value = getattr(value, attr)()
    if hasattr(value, "numpy"):
        try:
            return np.asarray(value.numpy(), dtype=np.float64)
        except TypeError:
            return np.asarray(value.float().numpy(), dtype=np.float64)
    raise TypeError(f"cannot convert {type(value).__name__} to an array")


def _lookup(mapping: Mapping[str, Any], name: str) -> Any:
    if name in mapping:
        return mapping[name]
    inner = mapping.get("state_dict")
    if isinstance(inner, Mapping) and name in inner:
        return inner[name]
    node: Any = mapping
    for part in name.split("."):
        if isinstance(node, Mapping) and part in node:
            node = node[part]
        else:
            raise TensorNotFound(name)
    return node


def _load_container(path: Path) -> Mapping[str, Any]:
    suffix = path.suffix.lower()
    if suffix == ".npz":
        return dict(np.load(path))
    if suffix == ".safetensors":
        try:
            from safetensors.numpy import load_file
        except ImportError as exc:
            raise RuntimeError("reading .safetensors requires the safetensors package") from exc
        return load_file(str(path))
    try:
        import torch
    except ImportError as exc:
        raise RuntimeError(f"reading {path.name} requires torch") from exc
    return torch.load(path, map_location="cpu", weights_only=True)


def _resolve_local(path: Path, tensor_name: str) -> np.ndarray:
    if path.is_dir():
        candidates = sorted(
            p for p in path.iterdir() if p.suffix.lower() in _CHECKPOINT_SUFFIXES
        )
        if not candidates:
            raise FileNotFoundError(f"no checkpoint files under {path}")
        last_error: Exception | None = None
        for candidate in candidates:
            try:
                return _resolve_local(candidate, tensor_name)
            except (TensorNotFound, RuntimeError) as exc:
                last_error = exc
        raise TensorNotFound(
            f"tensor {tensor_name!r} not found in any checkpoint under {path} "
            f"(last error: {last_error})"
        )
    container = _load_container(path)
    try:
        value = _lookup(container, tensor_name)
    except TensorNotFound:
        known = ", ".join(sorted(container)[:12])
        raise TensorNotFound(
            f"tensor {tensor_name!r} not found in {path} (keys include: {known})"
        ) from None
    return _to_array(value)


def resolve_tensor(checkpoint: str, tensor_name: str) -> np.ndarray:
    """Load the named tensor from a local path or a hub repo id."""
    path = Path(checkpoint)
    if path.exists():
        return _resolve_local(path, tensor_name)
    if "/" in checkpoint and not checkpoint.startswith((".", "/")):
        try:
            from huggingface_hub import snapshot_download
        except ImportError as exc:
            raise RuntimeError(
                f"{checkpoint!r} is not a local path and huggingface_hub is not "
                f"installed to resolve it as a hub id"
            ) from exc
        local = snapshot_download(checkpoint)
        return _resolve_local(Path(local), tensor_name)
    raise FileNotFoundError(f"checkpoint {checkpoint!r} does not exist")
