"""Flat-file persistence: JSON manifest + little-endian float32 blob, written atomically."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Mapping

import numpy as np

from .vit import ViTConfig, ViTParams

LE_F32 = np.dtype("<f4")


class ArtifactError(OSError):
    """An artifact is missing, truncated, or fails verification."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def read_json(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"missing artifact: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"{path}: not valid JSON ({e})") from None


def _manifest_digest(manifest: Mapping) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_sha256"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def blob_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def write_bundle(path: str | Path, kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping) -> dict:
    """Write ``<path>`` (manifest) and ``<path minus suffix>.bin`` (blob)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=LE_F32).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    bpath = blob_path(path)
    manifest = {
        "kind": kind,
        "version": 1,
        "dtype": "float32-le",
        "blob": bpath.name,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "meta": dict(meta),
    }
    manifest["manifest_sha256"] = _manifest_digest(manifest)
    atomic_write_bytes(bpath, blob)
    write_json(path, manifest)
    return manifest


def read_bundle(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    manifest = read_json(path)
    if manifest.get("manifest_sha256") != _manifest_digest(manifest):
        raise ArtifactError(f"{path}: manifest hash mismatch")
    if kind is not None and manifest.get("kind") != kind:
        raise ArtifactError(f"{path}: expected a {kind} manifest, found {manifest.get('kind')!r}")
    bpath = path.parent / manifest["blob"]
    if not bpath.is_file():
        raise ArtifactError(f"missing artifact: {bpath}")
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ArtifactError(f"{bpath}: blob hash mismatch")
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * LE_F32.itemsize != e["nbytes"] or e["offset"] + e["nbytes"] > len(blob):
            raise ArtifactError(f"{path}: tensor {e['name']} span does not match its shape")
        arr = np.frombuffer(blob, dtype=LE_F32, count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return manifest, tensors


CHECKPOINT, DATASET = "pmq-checkpoint", "pmq-dataset"


def save_checkpoint(path: str | Path, params: ViTParams, meta: Mapping | None = None) -> dict:
    body = {"config": params.config.to_dict()}
    body.update(meta or {})
    return write_bundle(path, CHECKPOINT, params.arrays, body)


def load_checkpoint(path: str | Path) -> tuple[ViTParams, dict]:
    manifest, tensors = read_bundle(path, CHECKPOINT)
    meta = manifest["meta"]
    cfg = ViTConfig(**meta["config"])
    return ViTParams(cfg, tensors), meta


def checkpoint_hash(path: str | Path) -> str:
    return read_json(path)["manifest_sha256"]


@contextmanager
def artifact_lock(directory: str | Path):
    """Advisory lock next to ``directory`` so the directory itself stays clean."""
    from filelock import FileLock, Timeout

    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(directory.with_name(directory.name + ".lock")))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ArtifactError(f"{directory} is in use by another pmq process") from None
    try:
        yield
    finally:
        lock.release()
