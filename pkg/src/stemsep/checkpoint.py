"""Versioned binary checkpoints: model configuration, parameters, buffers,
optimizer state, and training metadata with bitwise round-trips.

Layout: a 4-byte magic, u16 format major/minor, a u64 header length, a
canonical JSON header (sorted keys, no whitespace), then the raw little-
endian array blobs in manifest order. Canonical serialization makes
save -> load -> save byte-identical; loading refuses newer majors and
reports the byte offset of any truncation or corruption it detects.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointMismatchError,
    CheckpointVersionError,
    CorruptCheckpointError,
)
from .models import (
    ModelBundle,
    ModelConfig,
    ResidualConfig,
    build_enhancer,
    build_separator,
    restore_state,
)
from .optim import Adam, build_optimizer
from .tensor import using_dtype

MAGIC = b"SSEP"
FORMAT_MAJOR = 1
FORMAT_MINOR = 0
_HEADER_STRUCT = struct.Struct("<4sHHQ")


@dataclass
class Checkpoint:
    """In-memory checkpoint contents."""

    model_config: ModelConfig
    mode: str
    sources: tuple
    params: dict
    residual: ResidualConfig | None = None
    enhancer_config: ModelConfig | None = None
    optimizer: dict | None = None
    meta: dict | None = None

    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype


def _plain(value):
    """Recursively convert numpy scalars/containers to JSON-able types."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    return value


def make_checkpoint(bundle: ModelBundle, optimizer: Adam | None = None,
                    meta: dict | None = None) -> Checkpoint:
    """Snapshot a bundle (and optionally its optimizer) into a Checkpoint."""
    params = {name: p.data.copy() for name, p in bundle.named_parameters()}
    params.update({name: np.asarray(buf).copy() for name, buf in bundle.named_buffers()})
    opt_state = None
    if optimizer is not None:
        raw = optimizer.state_dict()
        opt_state = {
            "t": raw["t"], "beta1": raw["beta1"], "beta2": raw["beta2"], "eps": raw["eps"],
            "group_lrs": dict(raw["group_lrs"]),
            "arrays": {name: arr.copy() for name, arr in raw["arrays"].items()},
        }
    enhancer_cfg = bundle.enhancers[0].cfg if bundle.enhancers else None
    return Checkpoint(
        model_config=bundle.separator.cfg,
        mode=bundle.mode,
        sources=tuple(bundle.sources),
        params=params,
        residual=bundle.residual,
        enhancer_config=enhancer_cfg,
        optimizer=opt_state,
        meta=_plain(meta or {}),
    )


def bundle_from_checkpoint(ckpt: Checkpoint) -> ModelBundle:
    """Rebuild the models and load every parameter bitwise."""
    with using_dtype(ckpt.dtype()):
        separator = build_separator(ckpt.model_config, rng=0)
        enhancers = None
        if ckpt.mode == "enhancer":
            if ckpt.enhancer_config is None:
                raise CheckpointMismatchError("enhancer checkpoint is missing the enhancer config")
            enhancers = [build_enhancer(ckpt.enhancer_config, rng=0)
                         for _ in range(ckpt.model_config.source_count)]
        bundle = ModelBundle(ckpt.mode, separator, enhancers=enhancers,
                             residual=ckpt.residual, sources=tuple(ckpt.sources))
        restore_state(bundle, ckpt.params)
    return bundle


def optimizer_from_checkpoint(ckpt: Checkpoint, bundle: ModelBundle,
                              gru_clip_norm: float | None = 5.0) -> Adam:
    """Rebuild the two-group optimizer and restore its moment arrays."""
    if ckpt.optimizer is None:
        raise CheckpointMismatchError("checkpoint carries no optimizer state")
    conv_params, gru_params = bundle.trainable_groups()
    opt = build_optimizer(conv_params, gru_params,
                          ckpt.optimizer["group_lrs"].get("conv", 1e-3),
                          ckpt.optimizer["group_lrs"].get("gru", 1e-4),
                          gru_clip_norm=gru_clip_norm)
    opt.load_state_dict(ckpt.optimizer)
    return opt


# ---------------------------------------------------------------------------
# Serialization


def _manifest_arrays(ckpt: Checkpoint) -> list:
    entries = [("param." + name, arr) for name, arr in sorted(ckpt.params.items())]
    if ckpt.optimizer is not None:
        entries.extend(("opt." + name, arr)
                       for name, arr in sorted(ckpt.optimizer["arrays"].items()))
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _manifest_arrays(ckpt)
    manifest = []
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        nbytes = arr.nbytes
        manifest.append({"name": name, "dtype": str(arr.dtype),
                         "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    opt_header = None
    if ckpt.optimizer is not None:
        opt_header = {"t": int(ckpt.optimizer["t"]),
                      "beta1": float(ckpt.optimizer["beta1"]),
                      "beta2": float(ckpt.optimizer["beta2"]),
                      "eps": float(ckpt.optimizer["eps"]),
                      "group_lrs": {k: float(v) for k, v in ckpt.optimizer["group_lrs"].items()}}
    header = {
        "format": {"major": FORMAT_MAJOR, "minor": FORMAT_MINOR},
        "mode": ckpt.mode,
        "sources": list(ckpt.sources),
        "model_config": ckpt.model_config.to_dict(),
        "residual": {"iterations": ckpt.residual.iterations} if ckpt.residual else None,
        "enhancer_config": ckpt.enhancer_config.to_dict() if ckpt.enhancer_config else None,
        "optimizer": opt_header,
        "meta": _plain(ckpt.meta or {}),
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":"),
                              ensure_ascii=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER_STRUCT.pack(MAGIC, FORMAT_MAJOR, FORMAT_MINOR, len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path, expect_mode: str | None = None) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER_STRUCT.size:
        raise CorruptCheckpointError(
            f"checkpoint {path} truncated inside the fixed header "
            f"({len(blob)} of {_HEADER_STRUCT.size} bytes)", offset=len(blob))
    magic, major, minor, header_len = _HEADER_STRUCT.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})", offset=0)
    if major > FORMAT_MAJOR:
        raise CheckpointVersionError(
            f"checkpoint format {major}.{minor} is newer than supported {FORMAT_MAJOR}.{FORMAT_MINOR}")
    header_end = _HEADER_STRUCT.size + header_len
    if len(blob) < header_end:
        raise CorruptCheckpointError(
            f"checkpoint {path} truncated inside the JSON header", offset=len(blob))
    try:
        header = json.loads(blob[_HEADER_STRUCT.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unparseable checkpoint header: {exc}",
                                     offset=_HEADER_STRUCT.size)

    arrays = {}
    base = header_end
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CorruptCheckpointError(
                f"checkpoint {path} truncated inside tensor {entry['name']!r}", offset=len(blob))
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    params = {name[len("param."):]: arr for name, arr in arrays.items()
              if name.startswith("param.")}
    opt_state = None
    if header["optimizer"] is not None:
        opt_state = dict(header["optimizer"])
        opt_state["arrays"] = {name[len("opt."):]: arr for name, arr in arrays.items()
                               if name.startswith("opt.")}

    ckpt = Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        mode=header["mode"],
        sources=tuple(header["sources"]),
        params=params,
        residual=ResidualConfig(header["residual"]["iterations"]) if header["residual"] else None,
        enhancer_config=(ModelConfig.from_dict(header["enhancer_config"])
                         if header["enhancer_config"] else None),
        optimizer=opt_state,
        meta=header["meta"],
    )
    if expect_mode is not None and ckpt.mode != expect_mode:
        raise CheckpointMismatchError(
            f"checkpoint was trained in mode {ckpt.mode!r}, but {expect_mode!r} was requested")
    return ckpt


def parameter_fingerprint(source) -> str:
    """SHA-256 over all parameter names and bytes; accepts a ModelBundle,
    a Separator-like object with named_parameters, or a name->array dict."""
    if isinstance(source, dict):
        items = sorted((name, np.asarray(arr)) for name, arr in source.items())
    elif hasattr(source, "named_parameters"):
        pairs = (source.named_parameters() if isinstance(source, ModelBundle)
                 else source.named_parameters(""))
        items = sorted((name, p.data) for name, p in pairs)
    else:
        raise TypeError(f"cannot fingerprint {type(source).__name__}")
    digest = hashlib.sha256()
    for name, arr in items:
        digest.update(name.encode("utf-8"))
        digest.update(str(arr.dtype).encode())
        digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()
