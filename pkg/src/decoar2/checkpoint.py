"""Checkpoint file format.

Layout (little-endian)::

    b"DC2C" | u16 version | u32 header length | 32-byte sha256 of header
    | header (UTF-8 JSON, sorted keys) | blob section

The header indexes every blob (name, dtype, shape, offset, size) and carries
the sha256 of the blob section, the config snapshot, step counters, Adam
hyperparameters and the RNG derivation.  Serialization is canonical, so
save -> load -> save reproduces the file byte for byte.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import config_from_dict
from .core import AdamState
from .errors import CheckpointError, CheckpointVersionError, ChecksumError, MissingBlobError
from .training import STREAMS, TrainState, build_model

MAGIC = b"DC2C"
VERSION = 1
_PREFIX = struct.Struct("<4sHI32s")


def _blobs(state: TrainState) -> dict[str, torch.Tensor]:
    blobs = {}
    for name, t in state.model.state_dict().items():
        blobs[f"model/{name}"] = t
    for name in sorted(state.adam.exp_avg):
        blobs[f"adam/exp_avg/{name}"] = state.adam.exp_avg[name]
        blobs[f"adam/exp_avg_sq/{name}"] = state.adam.exp_avg_sq[name]
    return blobs


def checkpoint_bytes(state: TrainState) -> bytes:
    index, chunks, offset = [], [], 0
    for name, t in _blobs(state).items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy())
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob_section = b"".join(chunks)
    adam = state.adam
    header = {
        "format": "decoar2-checkpoint",
        "step": state.step,
        "config": state.config.to_dict(),
        "adam": {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "schedules": {
            "lr": {"warmup_steps": state.config.warmup_steps, "peak_lr": state.config.peak_lr,
                   "total_steps": state.config.total_steps},
            "temperature": dataclasses.asdict(state.config.temperature),
        },
        # every random draw is a pure function of (seed, stream, step)
        "rng": {"seed": state.config.rng_seed, "streams": STREAMS, "next_step": state.step},
        "blobs": index,
        "blob_sha256": hashlib.sha256(blob_section).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head), hashlib.sha256(head).digest()) + head + blob_section


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)
    return path


def _parse(data: bytes, source: str):
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{source}: file too short to be a checkpoint")
    magic, version, head_len, head_sha = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint version {version}, expected {VERSION}")
    head = data[_PREFIX.size:_PREFIX.size + head_len]
    if len(head) != head_len or hashlib.sha256(head).digest() != head_sha:
        raise ChecksumError(f"{source}: header checksum mismatch")
    try:
        header = json.loads(head.decode("utf-8"))
        blob_section = data[_PREFIX.size + head_len:]
        if hashlib.sha256(blob_section).hexdigest() != header["blob_sha256"]:
            raise ChecksumError(f"{source}: blob checksum mismatch")
        blobs = {}
        for entry in header["blobs"]:
            raw = blob_section[entry["offset"]:entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]).newbyteorder("<")).reshape(entry["shape"])
            blobs[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    except CheckpointError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: malformed checkpoint header ({exc})") from exc
    return header, blobs


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    header, blobs = _parse(path.read_bytes(), str(path))
    config = config_from_dict(header["config"])
    model = build_model(config)
    wanted = model.state_dict()
    missing = [f"model/{n}" for n in wanted if f"model/{n}" not in blobs]
    if missing:
        raise MissingBlobError(f"{path}: missing blobs {missing[:5]}")
    try:
        model.load_state_dict({n: blobs[f"model/{n}"] for n in wanted})
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: blobs do not fit the configured model ({exc})") from exc

    a = header["adam"]
    adam = AdamState(step=a["step"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
    for name, _ in model.named_parameters():
        for kind, store in (("exp_avg", adam.exp_avg), ("exp_avg_sq", adam.exp_avg_sq)):
            key = f"adam/{kind}/{name}"
            if key not in blobs:
                raise MissingBlobError(f"{path}: missing blob {key}")
            store[name] = blobs[key]
    return TrainState(config, model, adam, header["step"])
