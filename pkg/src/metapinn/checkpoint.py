"""Binary checkpoint format.

Layout::

    METAPINN-CKPT <version>\\n
    <manifest: one line of UTF-8 JSON>\\n
    <tensor blobs: little-endian IEEE-754 float64, row-major, manifest order>

The manifest records the method tag, model configuration, training
configuration and its SHA-256 digest, the data RNG state, loop counters,
Adam hyperparameters, the ordered tensor list (name, kind, shape) and a
SHA-256 of the blob section. Tensor kinds are ``param``, ``adam_m`` and
``adam_v``. Loading never returns partially decoded state.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .engine import AdamState
from .errors import (CheckpointCorruptError, ConfigError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError)
from .model import Model, ModelConfig

MAGIC = b"METAPINN-CKPT"
VERSION = 1


@dataclass
class CheckpointState:
    method: str
    model_config: ModelConfig = field(default_factory=ModelConfig)
    config: dict = field(default_factory=dict)
    adam: AdamState | None = None
    rng_state: dict | None = None
    counters: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _blob(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8").tobytes()


def dumps_checkpoint(params: dict, state: CheckpointState) -> bytes:
    entries = []
    blobs = []
    for name, t in params.items():
        entries.append({"name": name, "kind": "param", "shape": list(t.shape)})
        blobs.append(_blob(t))
    adam_meta = None
    if state.adam is not None:
        a = state.adam
        adam_meta = {"step": a.step, "lr0": a.lr0, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps}
        for kind, slots in (("adam_m", a.m), ("adam_v", a.v)):
            for name in params:
                entries.append({"name": name, "kind": kind, "shape": list(slots[name].shape)})
                blobs.append(_blob(slots[name]))
    payload = b"".join(blobs)
    manifest = {
        "method": state.method,
        "model_config": state.model_config.to_dict(),
        "config": state.config,
        "config_digest": config_digest(state.config),
        "rng_state": state.rng_state,
        "counters": state.counters,
        "extra": state.extra,
        "adam": adam_meta,
        "tensors": entries,
        "blob_bytes": len(payload),
        "blob_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = MAGIC + b" " + str(VERSION).encode() + b"\n"
    return head + json.dumps(manifest, separators=(",", ":")).encode() + b"\n" + payload


def save_checkpoint(path, params: dict, state: CheckpointState) -> Path:
    path = Path(path)
    data = dumps_checkpoint(params, state)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def loads_checkpoint(data: bytes):
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(MAGIC + b" "):
        raise CheckpointCorruptError("not a metapinn checkpoint (bad magic)")
    try:
        version = int(data[len(MAGIC) + 1:nl])
    except ValueError:
        raise CheckpointCorruptError("unreadable format version") from None
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    nl2 = data.find(b"\n", nl + 1)
    if nl2 < 0:
        raise CheckpointTruncatedError("checkpoint ends inside the manifest")
    try:
        manifest = json.loads(data[nl + 1:nl2])
        entries = manifest["tensors"]
        expected = int(manifest["blob_bytes"])
        model_config = ModelConfig(**manifest["model_config"])
        if not isinstance(entries, list):
            raise TypeError("tensor list is not a list")
        method = manifest["method"]
        if any(int(d) < 0 for e in entries for d in e["shape"]):
            raise ValueError("negative tensor dimension")
        sizes = [8 * math.prod(int(d) for d in e["shape"]) for e in entries]
        kinds = [e["kind"] for e in entries]
        names = [str(e["name"]) for e in entries]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointCorruptError(f"corrupted manifest: {exc}") from None
    if set(kinds) - {"param", "adam_m", "adam_v"}:
        raise CheckpointCorruptError(f"unknown tensor kinds {sorted(set(kinds))}")
    payload = data[nl2 + 1:]
    if sum(sizes) != expected:
        raise CheckpointShapeError("manifest shape list does not match its blob size")
    if len(payload) < expected:
        raise CheckpointTruncatedError(f"blob section has {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise CheckpointShapeError(f"{len(payload) - expected} unexpected trailing bytes")
    if hashlib.sha256(payload).hexdigest() != manifest.get("blob_sha256"):
        raise CheckpointCorruptError("tensor data checksum mismatch")

    try:
        shapes = Model(model_config, method).param_shapes()
    except ConfigError as exc:
        raise CheckpointCorruptError(f"manifest describes no valid model: {exc}") from None
    params, m, v = {}, {}, {}
    offset = 0
    for e, name, size in zip(entries, names, sizes):
        arr = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=offset)
        offset += size
        t = torch.from_numpy(arr.astype(np.float64).reshape(e["shape"]))
        if tuple(e["shape"]) != shapes.get(name):
            raise CheckpointShapeError(
                f"tensor {name} has shape {e['shape']}, architecture expects {shapes.get(name)}")
        {"param": params, "adam_m": m, "adam_v": v}[e["kind"]][name] = t
    if set(params) != set(shapes):
        raise CheckpointShapeError("checkpoint parameter set does not match the architecture")
    params = {k: params[k] for k in shapes}
    adam = None
    if manifest.get("adam") is not None:
        a = manifest["adam"]
        if set(m) != set(shapes) or set(v) != set(shapes):
            raise CheckpointShapeError("optimizer moments do not cover every parameter")
        try:
            adam = AdamState({k: m[k] for k in params}, {k: v[k] for k in params}, int(a["step"]),
                             float(a["lr0"]), float(a["beta1"]), float(a["beta2"]), float(a["eps"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointCorruptError(f"corrupted optimizer state: {exc}") from None
    state = CheckpointState(method, model_config, manifest.get("config", {}), adam,
                            manifest.get("rng_state"), manifest.get("counters", {}),
                            manifest.get("extra", {}))
    return params, state


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())
