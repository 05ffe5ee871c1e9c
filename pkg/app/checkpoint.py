"""
Checkpoint container.

Layout::

    CHGCKPT1\\n
    <manifest length: uint64 little-endian>
    <manifest: UTF-8 JSON>
    <payload: little-endian float64 tensors, back to back>

The manifest lists every tensor as ``{name, shape, dtype, offset, nbytes}``
(offsets relative to the payload start) together with the run's config hash,
the Adam scalars and a free-form ``extra`` mapping.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from app.autodiff import AdamState, Tensor
from app.exceptions import CheckpointFormatError, ConfigMismatch

logger = logging.getLogger(__name__)

MAGIC = b"CHGCKPT1\n"
_PAYLOAD_DTYPE = "<f8"
_ADAM_SCALARS = ("lr", "beta1", "beta2", "eps", "weight_decay", "decoupled", "step")


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config_hash: str
    adam: Optional[AdamState] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def tensors(self) -> Dict[str, Tensor]:
        return {
            name: Tensor(value.copy(), requires_grad=True, name=name)
            for name, value in self.params.items()
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _from_json(value: Any) -> Any:
    if isinstance(value, dict):
        if "__ndarray__" in value:
            return np.array(value["__ndarray__"], dtype=value["dtype"])
        return {k: _from_json(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_from_json(v) for v in value]
    return value


def save_checkpoint(
    path: Union[str, Path],
    params: Dict[str, Union[Tensor, np.ndarray]],
    adam_state: Optional[AdamState],
    cfg_hash: str,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    arrays: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        arrays[f"param/{name}"] = value.data if isinstance(value, Tensor) else value
    if adam_state is not None:
        for name, moment in adam_state.m.items():
            arrays[f"adam.m/{name}"] = moment
        for name, moment in adam_state.v.items():
            arrays[f"adam.v/{name}"] = moment

    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        blob = np.ascontiguousarray(arrays[name], dtype=_PAYLOAD_DTYPE).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arrays[name].shape),
                "dtype": _PAYLOAD_DTYPE,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    manifest = {
        "config_hash": cfg_hash,
        "tensors": entries,
        "adam": None
        if adam_state is None
        else {key: getattr(adam_state, key) for key in _ADAM_SCALARS},
        "extra": _jsonable(extra or {}),
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    logger.info("wrote checkpoint %s (%d tensors)", path, len(entries))
    return path


def load_checkpoint(
    path: Union[str, Path], expected_hash: Optional[str] = None
) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: missing CHGCKPT1 header")
    start = len(MAGIC)
    try:
        (length,) = struct.unpack_from("<Q", raw, start)
        manifest = json.loads(raw[start + 8 : start + 8 + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest") from exc
    payload = memoryview(raw)[start + 8 + length :]

    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise ConfigMismatch(
            f"{path}: config hash {manifest['config_hash']} != expected {expected_hash}"
        )

    params: Dict[str, np.ndarray] = {}
    adam = None
    if manifest.get("adam") is not None:
        adam = AdamState(**manifest["adam"])
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} truncated")
        values = np.frombuffer(payload[entry["offset"] : end], dtype=entry["dtype"])
        array = values.reshape(entry["shape"]).astype(np.float64)
        kind, _, name = entry["name"].partition("/")
        if kind == "param":
            params[name] = array
        elif kind == "adam.m" and adam is not None:
            adam.m[name] = array
        elif kind == "adam.v" and adam is not None:
            adam.v[name] = array
        else:
            raise CheckpointFormatError(f"{path}: unexpected tensor {entry['name']}")
    return Checkpoint(
        params=params,
        config_hash=manifest["config_hash"],
        adam=adam,
        extra=_from_json(manifest.get("extra", {})),
    )


def check_shapes(
    ckpt: Checkpoint, params: Dict[str, Tensor], prefixes: Tuple[str, ...] = ()
) -> None:
    """Raise ConfigMismatch when shared parameters disagree in shape."""
    for name, tensor in params.items():
        if prefixes and not name.startswith(prefixes):
            continue
        if name not in ckpt.params:
            raise ConfigMismatch(f"checkpoint lacks parameter {name}")
        if ckpt.params[name].shape != tensor.shape:
            raise ConfigMismatch(
                f"parameter {name}: checkpoint {ckpt.params[name].shape} vs {tensor.shape}"
            )
