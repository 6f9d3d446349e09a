"""Checkpoint container: ``manifest.json`` + little-endian float32 ``params.bin``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import ParamStore
from .text import Vocab

FORMAT_VERSION = 1
FLATTEN_ORDER = "tensors row-major; audio patches time-major (t * 8 + f), each patch 16 frames x 16 bands"
STAGES = ("mae", "clap")


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(params: ParamStore, path, stage: str, config: dict, *,
                    encoder_only: bool = False, vocab: Vocab | None = None,
                    optimizer=None, extra: dict | None = None) -> Path:
    """Write a checkpoint directory. ``encoder_only`` keeps just ``audio.*`` tensors."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.data for k, v in params.items() if not encoder_only or k.startswith("audio.")}
    opt_meta = None
    if optimizer is not None and not encoder_only:
        for k in params:
            if k in optimizer.m:
                tensors[f"opt.m/{k}"] = optimizer.m[k]
                tensors[f"opt.v/{k}"] = optimizer.v[k]
        opt_meta = {"t": optimizer.t, "weight_decay": optimizer.weight_decay,
                    "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
                    "decay": None if optimizer.decay is None else sorted(optimizer.decay)}
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT_VERSION,
        "stage": stage,
        "encoder_only": encoder_only,
        "flatten_order": FLATTEN_ORDER,
        "config": config,
        "config_hash": config_hash(config),
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
        "optimizer": opt_meta,
        "extra": extra or {},
    }
    (path / "params.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if vocab is not None:
        vocab.save(path / "vocab.txt")
    return path


class Checkpoint:
    def __init__(self, manifest: dict, params: ParamStore, optimizer_arrays: dict, vocab: Vocab | None):
        self.manifest = manifest
        self.params = params
        self.optimizer_arrays = optimizer_arrays
        self.vocab = vocab

    @property
    def stage(self) -> str:
        return self.manifest["stage"]

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    def restore_optimizer(self, state) -> None:
        meta = self.manifest.get("optimizer")
        if meta is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        state.t = meta["t"]
        state.m = {k[len("opt.m/"):]: v for k, v in self.optimizer_arrays.items() if k.startswith("opt.m/")}
        state.v = {k[len("opt.v/"):]: v for k, v in self.optimizer_arrays.items() if k.startswith("opt.v/")}


def load_checkpoint(path, expect_config: dict | None = None) -> Checkpoint:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {path}: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError("unsupported checkpoint format")
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise CheckpointError("manifest config does not match its hash")
    if expect_config is not None and config_hash(expect_config) != manifest["config_hash"]:
        raise CheckpointError("checkpoint was written for a different config")
    blob = (path / "params.bin").read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']} (truncated?)")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("blob checksum mismatch")
    params, opt = ParamStore(), {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(ad.dtype())
        if e["name"].startswith("opt."):
            opt[e["name"]] = arr
        else:
            params[e["name"]] = ad.parameter(arr)
    vocab_path = path / "vocab.txt"
    vocab = Vocab.load(vocab_path) if vocab_path.exists() else None
    return Checkpoint(manifest, params, opt, vocab)
