"""Checkpoint directories: a JSON manifest plus one blob per state dict.

Every blob's SHA-256 is recorded in the manifest and verified on load;
directories are written under a temporary name and renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .exceptions import CheckpointError

MANIFEST = "manifest.json"


def _tensor_bytes(t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    if t.dtype == torch.bfloat16:
        t = t.float()
    return t.numpy().tobytes()


def state_hash(obj) -> str:
    """Digest of every parameter and buffer value (order-independent of insertion)."""
    state = obj.state_dict() if isinstance(obj, nn.Module) else obj
    h = hashlib.sha256()
    for name in sorted(state):
        v = state[name]
        h.update(name.encode())
        if isinstance(v, torch.Tensor):
            h.update(str(v.dtype).encode())
            h.update(str(tuple(v.shape)).encode())
            h.update(_tensor_bytes(v))
        else:
            h.update(repr(v).encode())
    return h.hexdigest()


def architecture_hash(model: nn.Module) -> str:
    h = hashlib.sha256(type(model).__name__.encode())
    for name, v in sorted(model.state_dict().items()):
        h.update(f"{name}:{tuple(v.shape)}:{v.dtype};".encode())
    return h.hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class Checkpoint:
    path: Path
    manifest: dict
    blobs: dict = field(default_factory=dict)


def save_checkpoint(path, blobs: dict, manifest: Optional[dict] = None) -> Path:
    """Write ``blobs`` (name -> module, optimizer, or picklable state) to ``path``.

    Modules also get their architecture hash and value hash in the manifest.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest or {})
    files, arch = {}, {}
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        for name, obj in blobs.items():
            if isinstance(obj, nn.Module):
                arch[name] = architecture_hash(obj)
                state = obj.state_dict()
            elif hasattr(obj, "state_dict") and callable(obj.state_dict):
                state = obj.state_dict()
            else:
                state = obj
            buf = io.BytesIO()
            torch.save(state, buf)
            fname = f"{name}.pt"
            (tmp / fname).write_bytes(buf.getvalue())
            files[name] = {"file": fname, "sha256": hashlib.sha256(buf.getvalue()).hexdigest()}
        manifest["blobs"] = files
        manifest["architecture_hashes"] = {**manifest.get("architecture_hashes", {}), **arch}
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path, expected_architectures: Optional[dict] = None) -> Checkpoint:
    """Read and verify a checkpoint directory.

    ``expected_architectures`` maps blob name -> module (or architecture
    hash); any mismatch refuses the load.
    """
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise CheckpointError(f"{path}: no manifest (incomplete or not a checkpoint)")
    manifest = json.loads(mpath.read_text())
    for name, expected in (expected_architectures or {}).items():
        want = architecture_hash(expected) if isinstance(expected, nn.Module) else expected
        got = manifest.get("architecture_hashes", {}).get(name)
        if got != want:
            raise CheckpointError(f"{path}: architecture hash of {name!r} does not match the configured model")
    blobs = {}
    for name, info in manifest.get("blobs", {}).items():
        fpath = path / info["file"]
        if not fpath.exists():
            raise CheckpointError(f"{path}: blob {info['file']} missing")
        data = fpath.read_bytes()
        if hashlib.sha256(data).hexdigest() != info["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for {info['file']}")
        blobs[name] = torch.load(io.BytesIO(data), map_location="cpu", weights_only=False)
    return Checkpoint(path=path, manifest=manifest, blobs=blobs)


def restore(ckpt: Checkpoint, **targets) -> None:
    """Load blobs into modules/optimizers by name."""
    for name, target in targets.items():
        if name not in ckpt.blobs:
            raise CheckpointError(f"{ckpt.path}: no blob named {name!r}")
        target.load_state_dict(ckpt.blobs[name])
