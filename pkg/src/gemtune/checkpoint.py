"""Adapter-only binary checkpoints with compatibility checking.

One shared backbone file can serve many small adapter files. The format
is deterministic for identical model state:

    magic "AEM1" | u32 version | u64 metadata length | metadata JSON |
    u64 tensor count | per tensor: u32 name length, name, u32 ndim,
    u64 dims..., raw float64 little-endian data

A plain-text ``<path>.manifest`` sidecar lists each tensor's name,
shape, byte offset, and byte count for external tooling.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import EncoderConfig, MatchModel

MAGIC = b"AEM1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed, incompatible, or incomplete checkpoints."""


def backbone_fingerprint(model: MatchModel) -> str:
    """SHA-256 over backbone tensor bytes in name order."""
    digest = hashlib.sha256()
    for param in sorted(model.backbone_parameters(), key=lambda p: p.name):
        digest.update(param.name.encode("utf-8"))
        digest.update(np.ascontiguousarray(param.data).tobytes())
    return digest.hexdigest()


def _metadata(model: MatchModel, kind: str, tensor_names: list[str]) -> dict:
    cfg = model.config
    return {
        "kind": kind,
        "fingerprint": backbone_fingerprint(model),
        "hidden_dim": cfg.hidden_dim,
        "bottleneck_dim": cfg.bottleneck_dim,
        "num_layers": cfg.num_layers,
        "config_kind": cfg.config_kind,
        "config": asdict(cfg),
        "seed": model.seed,
        "insertion_map": sorted({name.rsplit(".", 1)[0] for name in tensor_names}),
    }


def _write_archive(path: str | Path, metadata: dict, tensors: dict[str, np.ndarray]) -> int:
    path = Path(path)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<Q", len(tensors)))
    manifest_rows = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        offset = buf.tell()
        data = arr.tobytes(order="C")
        buf.write(data)
        manifest_rows.append(f"{name}\t{'x'.join(map(str, arr.shape)) or '0d'}\t{offset}\t{len(data)}")
    payload = buf.getvalue()
    # atomic replace keeps readers from ever seeing a partial file
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except OSError as exc:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise OSError(f"failed to write checkpoint {path}: {exc}") from exc
    Path(f"{path}.manifest").write_text("\n".join(manifest_rows) + "\n", encoding="utf-8")
    return len(payload)


def _read_exact(fh, count: int, path: Path) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointError(f"truncated checkpoint {path}")
    return data


def read_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, path) != MAGIC:
            raise CheckpointError(f"{path} is not an adapter checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path} has unsupported format version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        metadata = json.loads(_read_exact(fh, meta_len, path))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, path))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8, path))[0] for _ in range(ndim))
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, size * 8, path)
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return metadata, tensors


def save_adapters(
    model: MatchModel,
    path: str | Path,
    include_head: bool = True,
    only_prefixes: tuple[str, ...] | None = None,
) -> int:
    """Write the trainable partition (adapters plus head); returns bytes written."""
    tensors = {p.name: p.data for p in model.trainable_parameters()}
    if not include_head:
        tensors = {n: t for n, t in tensors.items() if not n.startswith("head.")}
    if only_prefixes is not None:
        tensors = {n: t for n, t in tensors.items() if n.startswith(only_prefixes)}
    return _write_archive(path, _metadata(model, "adapters", list(tensors)), tensors)


def save_backbone(model: MatchModel, path: str | Path) -> int:
    """Write the shared frozen backbone; returns bytes written."""
    tensors = {p.name: p.data for p in model.backbone_parameters()}
    return _write_archive(path, _metadata(model, "backbone", list(tensors)), tensors)


def _target_name(name: str, model: MatchModel, freeze: bool) -> str:
    if freeze and model.config.config_kind == "pretrained_plus_task" and ".adapter." in name:
        return name.replace(".adapter.", ".adapter_pre.")
    return name


def load_adapters(model: MatchModel, path: str | Path, freeze: bool = False) -> None:
    """Copy checkpoint tensors into matching parameter slots.

    With ``freeze`` the loaded adapters join the frozen partition: in a
    stacked configuration task-adapter tensors land in the pre-trained
    lower slots. Fingerprint, dimensions, shapes, and slot coverage are
    all verified before anything is written.
    """
    metadata, tensors = read_archive(path)
    if metadata.get("kind") != "adapters":
        raise CheckpointError(f"{path} is a {metadata.get('kind')} checkpoint, not adapters")
    cfg = model.config
    for key, actual in (("hidden_dim", cfg.hidden_dim), ("num_layers", cfg.num_layers)):
        if metadata.get(key) != actual:
            raise CheckpointError(
                f"{path} was created for {key}={metadata.get(key)}, model has {key}={actual}"
            )
    if metadata.get("fingerprint") != backbone_fingerprint(model):
        raise CheckpointError(f"{path} backbone fingerprint does not match this model")

    params = model.named_parameters()
    staged: dict[str, np.ndarray] = {}
    for name, value in tensors.items():
        target = _target_name(name, model, freeze)
        if freeze and target.startswith("head."):
            continue  # a frozen lower stack never supplies the task head
        if target not in params:
            raise CheckpointError(f"{path} contains tensor {name!r} with no matching slot {target!r}")
        if params[target].shape != value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {value.shape}, slot expects {params[target].shape}"
            )
        staged[target] = value

    if freeze:
        if cfg.config_kind == "pretrained_plus_task":
            required = {p.name for p in model.adapter_parameters() if ".adapter_pre." in p.name}
        else:
            required = {p.name for p in model.adapter_parameters() if p.name.startswith("inv_adapter.")}
    else:
        required = {p.name for p in model.trainable_parameters()}
    missing = required - set(staged)
    if missing:
        raise CheckpointError(f"{path} is missing tensors: {sorted(missing)[:5]}")

    for target, value in staged.items():
        np.copyto(params[target].data, value)
        if freeze:
            params[target].freeze()


def storage_report(backbone_path: str | Path, adapter_paths: list[str | Path]) -> dict:
    """Byte accounting for one shared backbone and its adapter files."""
    backbone_bytes = os.path.getsize(backbone_path)
    per_adapter = [os.path.getsize(p) for p in adapter_paths]
    ratio = (sum(per_adapter) / len(per_adapter)) / backbone_bytes if per_adapter else 0.0
    return {
        "backbone_bytes": backbone_bytes,
        "per_adapter_bytes": per_adapter,
        "ratio": ratio,
    }
