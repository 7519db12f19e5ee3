"""Checkpoint archive: ``manifest.json`` plus one raw little-endian buffer per tensor.

Floating tensors are stored as float32 (``<f4``); integer buffers such as
BatchNorm's batch counter as int64 (``<i8``).  The archive is an
uncompressed zip with fixed member timestamps, so the same parameters
always serialise to the same bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .model import DetectorConfig, TinyVOD

FORMAT = "starmt-ckpt/1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(Exception):
    pass


class FingerprintMismatch(CheckpointError):
    pass


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def checkpoint_bytes(model: TinyVOD) -> bytes:
    tensors = []
    buffers = {}
    for name, t in model.state_dict().items():
        dtype = "<f4" if t.is_floating_point() else "<i8"
        raw = t.detach().cpu().numpy().astype(dtype).tobytes()
        fname = f"tensors/{name}.bin"
        buffers[fname] = raw
        tensors.append({"name": name, "shape": list(t.shape), "scope": model.scope_of(name),
                        "dtype": dtype, "file": fname, "sha256": hashlib.sha256(raw).hexdigest()})
    manifest = {"format": FORMAT, "fingerprint": model.fingerprint(),
                "config": model.config.to_dict(), "meta": model.meta, "tensors": tensors}
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w") as zf:
        zf.writestr(_member("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
        for fname, raw in buffers.items():
            zf.writestr(_member(fname), raw)
    return out.getvalue()


def save_checkpoint(model: TinyVOD, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint_bytes(data: bytes, config: DetectorConfig | None = None) -> TinyVOD:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blobs = {t["file"]: zf.read(t["file"]) for t in manifest["tensors"]}
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    stored_cfg = DetectorConfig.from_dict(manifest["config"])
    if stored_cfg.fingerprint() != manifest["fingerprint"]:
        raise FingerprintMismatch("manifest fingerprint does not match its own config")
    if config is not None and config.fingerprint() != manifest["fingerprint"]:
        raise FingerprintMismatch(
            f"checkpoint architecture {manifest['fingerprint']} != expected {config.fingerprint()}")
    model = TinyVOD(stored_cfg)
    state = {}
    for t in manifest["tensors"]:
        raw = blobs[t["file"]]
        if hashlib.sha256(raw).hexdigest() != t["sha256"]:
            raise CheckpointError(f"checksum mismatch in {t['name']}")
        if t.get("dtype", "<f4") not in ("<f4", "<i8"):
            raise CheckpointError(f"unsupported dtype {t['dtype']!r} for {t['name']}")
        arr = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float32 if t["dtype"] == "<f4" else np.int64))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise FingerprintMismatch(str(exc)) from exc
    for name, t in state.items():
        if t.is_floating_point() and not torch.isfinite(t).all():
            raise CheckpointError(f"non-finite values in {name}")
    model.meta = manifest.get("meta", {})
    model.eval()
    return model


def load_checkpoint(path: str | Path, config: DetectorConfig | None = None) -> TinyVOD:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return load_checkpoint_bytes(path.read_bytes(), config)
