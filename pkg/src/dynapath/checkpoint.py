"""Binary checkpoints of a full :class:`~dynapath.trainer.TrainState`.

Layout (little-endian)::

    "SDCK" | u32 version | 32-byte config digest | u64 meta_len | u64 blob_len
    | u32 crc32(header so far) | meta JSON | float64 blob | sha256(meta + blob)
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .config import RunConfig
from .trainer import TrainState

MAGIC = b"SDCK"
VERSION = 1
_HEAD = struct.Struct("<4sI32sQQ")
_CRC = struct.Struct("<I")


class CheckpointError(ValueError):
    """Unreadable, corrupted, truncated or mismatched checkpoint."""


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.model.params.items():
        arrays[f"model/{name}"] = t.data
    for name, t in state.policy.params.items():
        arrays[f"policy/{name}"] = t.data
    for tag, opt in (("model_opt", state.model_opt), ("policy_opt", state.policy_opt)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"{tag}/m/{i}"] = m
            arrays[f"{tag}/v/{i}"] = v
    return arrays


def save_checkpoint(state: TrainState, config: RunConfig, path: str | Path) -> None:
    arrays = _state_arrays(state)
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    meta = {
        "config": config.state_dict(),
        "step": state.step,
        "c_ema": state.c_ema,
        "c_min": state.c_min,
        "policy_calls": state.policy_calls,
        "model_opt_t": state.model_opt.t,
        "policy_opt_t": state.policy_opt.t,
        "rng": state.rng.bit_generator.state,
        "data_rng": state.data_rng.bit_generator.state,
        "arrays": index,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    blob = b"".join(chunks)
    head = _HEAD.pack(MAGIC, VERSION, config.digest(), len(meta_bytes), len(blob))
    head += _CRC.pack(zlib.crc32(head))
    body = meta_bytes + blob
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head + body + hashlib.sha256(body).digest())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, bytes, bytes]:
    """Validate framing and integrity; returns (meta, blob, stored digest)."""
    data = Path(path).read_bytes()
    hsize = _HEAD.size + _CRC.size
    if len(data) < hsize:
        raise CheckpointError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, digest, meta_len, blob_len = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, not a checkpoint")
    (crc,) = _CRC.unpack_from(data, _HEAD.size)
    if crc != zlib.crc32(data[: _HEAD.size]):
        raise CheckpointError(f"{path}: header checksum mismatch (corrupted header)")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {VERSION}")
    expected = hsize + meta_len + blob_len + 32
    if len(data) != expected:
        raise CheckpointError(f"{path}: length {len(data)} bytes, header declares {expected} (truncated or padded)")
    body = data[hsize : hsize + meta_len + blob_len]
    if hashlib.sha256(body).digest() != data[-32:]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    meta = json.loads(body[:meta_len])
    return meta, body[meta_len:], digest


def load_checkpoint(path: str | Path, config: RunConfig | None = None) -> tuple[TrainState, RunConfig]:
    """Rebuild the train state. With ``config`` given, its digest must match the file's."""
    meta, blob, digest = read_checkpoint(path)
    stored = RunConfig.from_dict(meta["config"])
    if stored.digest() != digest:
        raise CheckpointError(f"{path}: embedded config does not match the header digest")
    if config is not None and config.digest() != digest:
        raise CheckpointError(f"{path}: config digest mismatch; the checkpoint was written for a different config")
    cfg = config if config is not None else stored
    state = TrainState.create(cfg.model, cfg.trainer, cfg.decision_space, cfg.seed, cfg.task.seed)
    targets = _state_arrays(state)
    for entry in meta["arrays"]:
        dst = targets.get(entry["name"])
        if dst is None or list(dst.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: array {entry['name']} does not fit the configured model")
        n = int(np.prod(entry["shape"])) * 8
        dst[...] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=entry["offset"]).reshape(dst.shape)
    state.step = meta["step"]
    state.c_ema = meta["c_ema"]
    state.c_min = meta["c_min"]
    state.policy_calls = meta["policy_calls"]
    state.model_opt.t = meta["model_opt_t"]
    state.policy_opt.t = meta["policy_opt_t"]
    state.rng.bit_generator.state = meta["rng"]
    state.data_rng.bit_generator.state = meta["data_rng"]
    return state, cfg
