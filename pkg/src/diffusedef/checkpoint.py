"""Checkpoint directories: ``manifest.json`` plus raw little-endian ``weights.bin``."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .diffusion import DenoiserConfig, DiffusionDenoiser, NoiseSchedule, linear_schedule
from .model import EncoderClassifier, ModelConfig
from .text import Vocab

MANIFEST, WEIGHTS = "manifest.json", "weights.bin"


class CheckpointError(RuntimeError):
    pass


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def params_digest(params: dict) -> str:
    """sha256 over names, shapes, dtypes and little-endian bytes in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(params):
        a = _le(np.asarray(params[name]))
        h.update(f"{name}|{a.shape}|{a.dtype.str}\n".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_params(path, params: dict, kind: str, extra: dict) -> str:
    """Write a checkpoint directory; returns the content hash stored in the manifest."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    tensors, offset, blobs = [], 0, []
    for name in sorted(params):
        a = _le(np.asarray(params[name]))
        tensors.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str, "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    data = b"".join(blobs)
    digest = params_digest(params)
    manifest = {"kind": kind, "tensors": tensors, "sha256": digest, "weights_sha256": hashlib.sha256(data).hexdigest(), **extra}
    (out / WEIGHTS).write_bytes(data)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def load_params(path, kind: str):
    src = Path(path)
    try:
        manifest = json.loads((src / MANIFEST).read_text(encoding="utf-8"))
        data = (src / WEIGHTS).read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"missing checkpoint file: {e.filename}") from None
    if manifest.get("kind") != kind:
        raise CheckpointError(f"{src} holds a {manifest.get('kind')!r} checkpoint, expected {kind!r}")
    if hashlib.sha256(data).hexdigest() != manifest["weights_sha256"]:
        raise CheckpointError(f"{src / WEIGHTS} does not match its manifest hash")
    params = {}
    for t in manifest["tensors"]:
        buf = data[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        params[t["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    if params_digest(params) != manifest["sha256"]:
        raise CheckpointError(f"{src} parameter hash mismatch")
    return params, manifest


def save_model(path, model: EncoderClassifier, vocab: Vocab, config_echo: dict | None = None) -> str:
    extra = {"model": model.config_dict(), "vocab": vocab.to_list(), "config": config_echo or {}}
    return save_params(path, model.params, "encoder_classifier", extra)


def load_model(path):
    params, m = load_params(path, "encoder_classifier")
    return EncoderClassifier(ModelConfig(**m["model"]), params), Vocab.from_list(m["vocab"]), m


def save_denoiser(path, den: DiffusionDenoiser, sched_args: dict, base_hash: str, config_echo: dict | None = None) -> str:
    extra = {
        "denoiser": {**vars(den.cfg)},
        "schedule": dict(sched_args),
        "base_sha256": base_hash,
        "config": config_echo or {},
    }
    return save_params(path, den.params, "diffusion_denoiser", extra)


def load_denoiser(path) -> tuple[DiffusionDenoiser, NoiseSchedule, dict]:
    params, m = load_params(path, "diffusion_denoiser")
    s = m["schedule"]
    return DiffusionDenoiser(DenoiserConfig(**m["denoiser"]), params), linear_schedule(s["T"], s["beta1"], s["betaT"]), m


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
