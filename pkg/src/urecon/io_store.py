"""Portable persistence: binary tensor files, checkpoint directories, run manifests.

Artifacts are written in a minimal language-neutral layout so runs can be
diffed, archived and re-read without a deep-learning framework.

Tensor file (``.tnsr``)::

    bytes 0..7    magic "URECTNSR"
    byte  8       dtype code (0 = float32)
    byte  9       rank, uint8 (<= 4)
    4 * rank      shape, uint32 little-endian
    remainder     payload, float32 little-endian, row-major

A checkpoint is a directory holding ``manifest.json`` plus one tensor file
per named parameter.  A run manifest (``run.json``) records the resolved
config, seed, per-epoch metric rows and checkpoint paths of one
training/evaluation run.  Both manifests are plain JSON with sorted keys.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

MAGIC = b"URECTNSR"
TENSOR_SUFFIX = ".tnsr"
MAX_RANK = 4
_DTYPE_F32 = 0

STAGES = ("S1", "S2", "S3", "S4")

CHECKPOINT_MANIFEST = "manifest.json"
RUN_MANIFEST = "run.json"


class FormatError(ValueError):
    """Raised when a stored artifact does not match its declared layout."""


def write_tensor(path, tensor):
    """Write a float32 tensor file; returns the path written.

    Rejects non-finite values and rank > 4.  Input is cast to float32; a
    value that overflows float32 counts as non-finite and is rejected.
    """
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    path = Path(path)
    header = MAGIC + struct.pack("<BB", _DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    path.write_bytes(header + arr.tobytes(order="C"))
    return path


def read_tensor(path):
    """Read a tensor file back as a float32 array (bit-exact round trip)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 2:
        raise FormatError(f"{path}: file too short for header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    dtype_code, rank = struct.unpack_from("<BB", raw, len(MAGIC))
    if dtype_code != _DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    if rank > MAX_RANK:
        raise FormatError(f"{path}: rank {rank} exceeds maximum {MAX_RANK}")
    offset = len(MAGIC) + 2
    if len(raw) < offset + 4 * rank:
        raise FormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(raw) - offset != 4 * count:
        raise FormatError(
            f"{path}: payload holds {(len(raw) - offset) // 4} values, "
            f"shape {shape} requires {count}"
        )
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return arr.reshape(shape).copy()


def save_checkpoint(model, stage, directory, variant=None):
    """Persist a model's parameters plus manifest; returns the directory.

    Parameters must be float32 and finite: storage never casts silently.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    params = {}
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype != np.float32:
            raise ValueError(f"parameter {name} has dtype {arr.dtype}, expected float32")
        write_tensor(directory / (name + TENSOR_SUFFIX), arr)
        params[name] = list(arr.shape)
    manifest = {
        "kind": "checkpoint",
        "format_version": 1,
        "stage": stage,
        "arch": model.arch_config(),
        "anatomies": model.anatomy_registry(),
        "params": params,
    }
    if variant is not None:
        manifest["variant"] = variant
    _write_json(directory / CHECKPOINT_MANIFEST, manifest)
    return directory


def read_checkpoint_manifest(directory):
    path = Path(directory) / CHECKPOINT_MANIFEST
    if not path.is_file():
        raise FormatError(f"{directory}: missing {CHECKPOINT_MANIFEST}")
    manifest = json.loads(path.read_text())
    if manifest.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint manifest")
    if manifest.get("stage") not in STAGES:
        raise FormatError(f"{path}: missing or invalid stage tag")
    return manifest


def load_checkpoint(directory):
    """Rebuild the model recorded in ``directory`` with bit-exact parameters.

    Every manifest entry must resolve to an existing tensor file of the
    declared shape; loading never reshapes or casts.  The pipeline stage tag
    is attached as ``model.stage`` and the variant label as ``model.variant``.
    """
    import torch

    from .model import CascadeNet

    directory = Path(directory)
    manifest = read_checkpoint_manifest(directory)
    anatomies = sorted(manifest["anatomies"], key=manifest["anatomies"].get)
    model = CascadeNet.from_arch(manifest["arch"], anatomies=anatomies)
    state = {}
    for name, shape in manifest["params"].items():
        tensor_path = directory / (name + TENSOR_SUFFIX)
        if not tensor_path.is_file():
            raise FormatError(f"{directory}: manifest lists missing tensor {name}")
        arr = read_tensor(tensor_path)
        if list(arr.shape) != list(shape):
            raise FormatError(
                f"{directory}: tensor {name} has shape {list(arr.shape)}, "
                f"manifest declares {list(shape)}"
            )
        state[name] = torch.from_numpy(arr)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise FormatError(f"{directory}: parameters do not match architecture: {exc}") from exc
    model.stage = manifest["stage"]
    model.variant = manifest.get("variant")
    return model


def write_run_manifest(path, manifest):
    """Write a run manifest, checking metric-row ordering and checkpoint paths."""
    rows = manifest.get("metrics", [])
    epochs = [row["epoch"] for row in rows]
    if any(b < a for a, b in zip(epochs, epochs[1:])):
        raise ValueError("metric rows must be ordered by epoch")
    path = Path(path)
    for name, ckpt in manifest.get("checkpoints", {}).items():
        if not (path.parent / ckpt).exists():
            raise ValueError(f"checkpoint path {ckpt!r} ({name}) does not exist")
    _write_json(path, _jsonable(manifest))
    return path


def read_run_manifest(path):
    manifest = json.loads(Path(path).read_text())
    if manifest.get("kind") not in ("run", "eval"):
        raise FormatError(f"{path}: not a run manifest")
    return manifest


def _jsonable(obj):
    """Recursively replace non-finite floats with strings so output stays valid JSON."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # "inf" / "-inf" / "nan"; float() parses these back
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _jsonable(float(obj))
    return obj


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
