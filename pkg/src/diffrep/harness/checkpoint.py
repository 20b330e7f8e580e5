"""Tensor container used for checkpoints and feature stores.

Byte layout (all integers little-endian)::

    0   8 bytes   magic b"DREPTNSR"
    8   u32       format version (currently 1)
    12  u64       header length H
    20  H bytes   UTF-8 JSON manifest
    20+H          payload: tensors back to back, C order, little-endian

The manifest holds ``tensors`` (name -> dtype, shape, offset, nbytes,
sha256 relative to the payload start), ``payload_nbytes``,
``payload_sha256``, and free-form metadata (schedule, U-Net config,
training step, ...).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

MAGIC = b"DREPTNSR"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.float16: "<f2",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
    torch.bool: "|b1",
}
_NAMES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


def _sha(b) -> str:
    return hashlib.sha256(b).hexdigest()


def save_container(path, tensors: Dict[str, torch.Tensor], meta: Optional[dict] = None) -> None:
    directory = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes(order="C")
        directory[name] = {"dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset,
                           "nbytes": len(raw), "sha256": _sha(raw)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, **(meta or {}), "tensors": directory,
                "payload_nbytes": len(payload), "payload_sha256": _sha(payload)}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"failed writing {path}: {exc}") from exc


def read_manifest(path) -> Tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise TruncatedFileError(f"{path}: file is {len(data)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a tensor container")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    end = _PREFIX.size + hlen
    if len(data) < end:
        raise TruncatedFileError(f"{path}: header needs {hlen} bytes, only {len(data) - _PREFIX.size} present")
    manifest = json.loads(data[_PREFIX.size:end].decode())
    if manifest.get("format_version") != version:
        raise VersionMismatchError(f"{path}: manifest version {manifest.get('format_version')} != prefix version {version}")
    return manifest, data[end:]


def load_container(path, kind: Optional[str] = None) -> Tuple[Dict[str, torch.Tensor], dict]:
    manifest, payload = read_manifest(path)
    need = manifest["payload_nbytes"]
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise CheckpointError(f"{path}: {len(payload) - need} trailing bytes after payload")
    if _sha(payload) != manifest["payload_sha256"]:
        bad = [
            f"{name} [bytes {info['offset']}..{info['offset'] + info['nbytes']})"
            for name, info in sorted(manifest["tensors"].items(), key=lambda kv: kv[1]["offset"])
            if _sha(payload[info["offset"]:info["offset"] + info["nbytes"]]) != info["sha256"]
        ]
        where = ", ".join(bad) if bad else "payload"
        raise ChecksumError(f"{path}: checksum mismatch in {where}")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} container, found {manifest.get('kind')!r}")
    tensors = {}
    for name, info in manifest["tensors"].items():
        raw = payload[info["offset"]:info["offset"] + info["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(info["dtype"])).reshape(info["shape"])
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    meta = {k: v for k, v in manifest.items() if k not in ("tensors", "payload_nbytes", "payload_sha256")}
    return tensors, meta


def save_checkpoint(model, path, *, schedule=None, step: int = 0, extra: Optional[dict] = None) -> None:
    """Write U-Net parameters plus config, schedule parameters and step."""
    meta = {
        "kind": "checkpoint",
        "unet_config": model.config.to_dict(),
        "schedule": schedule.params() if schedule is not None else None,
        "step": int(step),
        **(extra or {}),
    }
    save_container(path, dict(model.state_dict()), meta)


def load_checkpoint(path):
    """Return ``(model, schedule or None, meta)``."""
    from ..ddpm import build_linear_schedule
    from ..unet import UNetConfig, build_unet

    tensors, meta = load_container(path, kind="checkpoint")
    model = build_unet(UNetConfig.from_dict(meta["unet_config"]))
    dtypes = {t.dtype for t in tensors.values()}
    if len(dtypes) == 1:
        model = model.to(dtypes.pop())
    model.load_state_dict(tensors, strict=True)
    sched = meta.get("schedule")
    schedule = None
    if sched:
        schedule = build_linear_schedule(sched["T"], sched["beta_start"], sched["beta_end"])
    return model, schedule, meta
