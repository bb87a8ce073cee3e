"""Checkpoint persistence: a JSON manifest plus one raw binary blob.

The manifest names every tensor (parameter registry entries first, then
optimizer moments) with its shape and dtype; the blob concatenates the
raw little-endian bytes in manifest order. A SHA-256 checksum of the blob
is stored in the manifest and validated on load, so round trips are
bit-exact or fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .optim import AdamWState, adamw_init
from .unet import UNet, UNetConfig

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint"]

_FORMAT = "sreseg-checkpoint-1"


class CheckpointError(Exception):
    """Raised when a checkpoint is corrupt or inconsistent."""


def _little_endian(dtype: np.dtype) -> np.dtype:
    return dtype.newbyteorder("<") if dtype.byteorder == ">" else dtype


def save_checkpoint(net: UNet, state: AdamWState, path: str | Path,
                    seed: int | None = None, epoch: int = 0,
                    extra: dict | None = None) -> Path:
    """Write `<path>.json` and `<path>.bin`; returns the manifest path."""
    path = Path(path)
    params = net.parameters()
    entries = []
    chunks = []

    def add(name: str, arr: np.ndarray):
        arr = np.ascontiguousarray(arr, dtype=_little_endian(arr.dtype))
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        chunks.append(arr.tobytes())

    for name, arr in params.items():
        add(name, arr)
    for name in params:
        add(f"adamw.m.{name}", state.m[name])
    for name in params:
        add(f"adamw.v.{name}", state.v[name])

    blob = b"".join(chunks)
    manifest = {
        "format": _FORMAT,
        "config": net.cfg.to_dict(),
        "dtype": net.dtype.str,
        "seed": seed,
        "epoch": epoch,
        "adamw": {
            "lr0": state.lr0,
            "betas": list(state.betas),
            "eps": state.eps,
            "weight_decay": state.weight_decay,
            "step": state.step,
        },
        "entries": entries,
        "checksum": "sha256:" + hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra

    manifest_path = path.with_suffix(".json")
    blob_path = path.with_suffix(".bin")
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_checkpoint(path: str | Path) -> tuple[UNet, AdamWState, dict]:
    """Rebuild (net, optimizer state, manifest) from a checkpoint pair.

    Raises CheckpointError on checksum mismatch or manifest/blob
    inconsistency.
    """
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
    blob_path = manifest_path.with_suffix(".bin")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {e}") from e
    if manifest.get("format") != _FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"unreadable blob {blob_path}: {e}") from e

    digest = "sha256:" + hashlib.sha256(blob).hexdigest()
    if digest != manifest["checksum"]:
        raise CheckpointError(
            f"checksum mismatch for {blob_path}: manifest {manifest['checksum']}, "
            f"blob {digest}"
        )

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["entries"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if offset + nbytes > len(blob):
            raise CheckpointError(
                f"blob truncated: entry {entry['name']} needs bytes "
                f"[{offset}, {offset + nbytes}) of {len(blob)}"
            )
        tensors[entry["name"]] = np.frombuffer(
            blob, dtype=dtype, count=int(np.prod(shape, dtype=np.int64)), offset=offset
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"blob has {len(blob) - offset} trailing bytes")

    cfg = UNetConfig.from_dict(manifest["config"])
    net = UNet(cfg, seed=0, dtype=np.dtype(manifest["dtype"]))
    param_names = list(net.parameters())
    missing = [n for n in param_names if n not in tensors]
    if missing:
        raise CheckpointError(f"manifest lacks parameters {missing[:4]}")
    net.set_parameters({n: tensors[n] for n in param_names})

    meta = manifest["adamw"]
    state = adamw_init(net.parameters(), lr0=meta["lr0"], betas=tuple(meta["betas"]),
                       eps=meta["eps"], weight_decay=meta["weight_decay"])
    state.step = meta["step"]
    for name in param_names:
        m_name, v_name = f"adamw.m.{name}", f"adamw.v.{name}"
        if m_name not in tensors or v_name not in tensors:
            raise CheckpointError(f"manifest lacks optimizer moments for {name}")
        state.m[name][...] = tensors[m_name]
        state.v[name][...] = tensors[v_name]
    return net, state, manifest
