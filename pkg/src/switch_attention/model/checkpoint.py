"""
Binary checkpoint container.

Layout (all integers little-endian):

* 8 bytes magic ``SWIATTN\\0``
* u32 format version
* u32 length + UTF-8 JSON header: model config, training step, free-form metadata
* u32 length + UTF-8 JSON manifest: one entry (name, dtype, shape, offset) per tensor
* the raw tensor payloads, '<f8', in manifest order; offsets are relative to the start of the payload block
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from typing_extensions import Any, Dict, List, Optional, Union

from ..exceptions import (
    CheckpointManifestError,
    ConfigurationError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    IncompatibleDonorError,
)
from .config import ModelConfig
from .transformer import SwiAttnModel

logger = logging.getLogger(__name__)

MAGIC = b"SWIATTN\0"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = "<f8"

PathLike = Union[str, os.PathLike]


@dataclass
class ManifestEntry:
    name: str
    shape: List[int]
    offset: int
    dtype: str = PAYLOAD_DTYPE

    @property
    def byte_count(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * np.dtype(self.dtype).itemsize

    def to_json(self) -> Dict[str, Any]:
        return {"name": self.name, "dtype": self.dtype, "shape": list(self.shape), "offset": self.offset}


@dataclass
class Checkpoint:
    """
    The content of a checkpoint file.
    """

    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    step: int = 0
    optimizer_state: Optional[Dict[str, np.ndarray]] = None
    """
    Optimizer moments stored as extra tensors, keyed by parameter name.
    """

    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_model(
        cls,
        model: SwiAttnModel,
        step: int = 0,
        optimizer_state: Optional[Dict[str, np.ndarray]] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> Checkpoint:
        tensors = {name: tensor.data.copy() for name, tensor in model.named_parameters().items()}
        return cls(model.config, tensors, step, optimizer_state, metadata or {})

    def to_model(self, config: Optional[ModelConfig] = None) -> SwiAttnModel:
        """
        Instantiates a model and fills it with the stored tensors.

        :param config: Overrides the stored config; every parameter shape must still match.
        """
        config = config or self.config
        model = SwiAttnModel.initialize(config)
        parameters = model.named_parameters()
        missing = set(parameters) - set(self.tensors)
        if missing:
            raise IncompatibleDonorError("checkpoint lacks parameters", sorted(missing)[0])
        for name, tensor in parameters.items():
            stored = self.tensors[name]
            if stored.shape != tensor.shape:
                logger.error(f"Checkpoint tensor {name} has shape {stored.shape}, model expects {tensor.shape}")
                raise IncompatibleDonorError(f"shape {stored.shape} vs {tensor.shape}", name)
            tensor.data = stored.copy()
        return model


def save_checkpoint(
    model_or_checkpoint: Union[SwiAttnModel, Checkpoint],
    path: PathLike,
    step: int = 0,
) -> None:
    """
    Writes a model or a checkpoint to `path`, bit-exactly.
    """
    if isinstance(model_or_checkpoint, SwiAttnModel):
        checkpoint = Checkpoint.from_model(model_or_checkpoint, step)
    else:
        checkpoint = model_or_checkpoint

    arrays: Dict[str, np.ndarray] = dict(checkpoint.tensors)
    for name, state in (checkpoint.optimizer_state or {}).items():
        arrays[f"optimizer.{name}"] = state

    manifest, offset = [], 0
    for name, array in arrays.items():
        entry = ManifestEntry(name, list(np.shape(array)), offset)
        manifest.append(entry)
        offset += entry.byte_count

    header = {
        "config": checkpoint.config.to_json(),
        "step": checkpoint.step,
        "has_optimizer_state": checkpoint.optimizer_state is not None,
        "metadata": checkpoint.metadata,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    manifest_bytes = json.dumps([entry.to_json() for entry in manifest]).encode("utf-8")

    with open(path, "wb") as file:
        file.write(MAGIC)
        file.write(struct.pack("<I", FORMAT_VERSION))
        file.write(struct.pack("<I", len(header_bytes)))
        file.write(header_bytes)
        file.write(struct.pack("<I", len(manifest_bytes)))
        file.write(manifest_bytes)
        for array in arrays.values():
            file.write(np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes())
    logger.debug(f"Wrote checkpoint {path} with {len(manifest)} tensors ({offset} payload bytes)")


def _read_block(data: bytes, cursor: int, path: str) -> tuple:
    if cursor + 4 > len(data):
        raise CheckpointTruncatedError(path, cursor + 4, len(data))
    (length,) = struct.unpack_from("<I", data, cursor)
    cursor += 4
    if cursor + length > len(data):
        raise CheckpointTruncatedError(path, cursor + length, len(data))
    try:
        content = json.loads(data[cursor : cursor + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointManifestError(path, f"unreadable JSON block ({e})")
    return content, cursor + length


def _decode_config(header: Any, path: str) -> ModelConfig:
    if not isinstance(header, dict) or not isinstance(header.get("config"), dict):
        raise CheckpointManifestError(path, "header has no model config")
    try:
        return ModelConfig.from_json(header["config"])
    except (KeyError, TypeError, ValueError, AttributeError, ImportError, ConfigurationError) as e:
        raise CheckpointManifestError(path, f"unreadable model config ({e.__class__.__name__}: {e})")


def read_checkpoint(path: PathLike) -> Checkpoint:
    """
    Parses a checkpoint file and validates it completely before returning anything.
    """
    path_str = str(path)
    with open(path, "rb") as file:
        data = file.read()

    if len(data) < len(MAGIC) + 4:
        raise CheckpointTruncatedError(path_str, len(MAGIC) + 4, len(data))
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointManifestError(path_str, "missing magic bytes")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        logger.error(f"Rejecting checkpoint {path_str} with format version {version}")
        raise CheckpointVersionError(path_str, version, FORMAT_VERSION)

    header, cursor = _read_block(data, len(MAGIC) + 4, path_str)
    config = _decode_config(header, path_str)
    raw_manifest, cursor = _read_block(data, cursor, path_str)
    try:
        manifest = [
            ManifestEntry(e["name"], [int(s) for s in e["shape"]], int(e["offset"]), e["dtype"])
            for e in raw_manifest
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointManifestError(path_str, f"malformed entry ({e})")

    expected_offset = 0
    for entry in manifest:
        if any(size < 0 for size in entry.shape):
            raise CheckpointManifestError(path_str, f"negative dimension in shape {entry.shape} of {entry.name}")
        if entry.dtype != PAYLOAD_DTYPE:
            raise CheckpointManifestError(path_str, f"unsupported dtype {entry.dtype} of {entry.name}")
        if entry.offset != expected_offset:
            raise CheckpointManifestError(path_str, f"{entry.name} starts at {entry.offset}, expected {expected_offset}")
        expected_offset += entry.byte_count
    if cursor + expected_offset != len(data):
        logger.error(f"Rejecting checkpoint {path_str}: size mismatch")
        raise CheckpointTruncatedError(path_str, cursor + expected_offset, len(data))

    tensors, optimizer_state = {}, {}
    for entry in manifest:
        start = cursor + entry.offset
        array = np.frombuffer(data, dtype=PAYLOAD_DTYPE, count=entry.byte_count // 8, offset=start)
        try:
            array = array.reshape(entry.shape).astype(np.float64)
        except ValueError as e:
            raise CheckpointManifestError(path_str, f"shape {entry.shape} of {entry.name} does not fit its bytes ({e})")
        if not np.isfinite(array).all():
            raise CheckpointManifestError(path_str, f"{entry.name} holds NaN or Inf")
        if entry.name.startswith("optimizer."):
            optimizer_state[entry.name[len("optimizer.") :]] = array
        else:
            tensors[entry.name] = array

    return Checkpoint(
        config=config,
        tensors=tensors,
        step=int(header.get("step", 0)),
        optimizer_state=optimizer_state if header.get("has_optimizer_state") else None,
        metadata=header.get("metadata", {}),
    )


def load_checkpoint(path: PathLike, config: Optional[ModelConfig] = None) -> SwiAttnModel:
    """
    Reads a checkpoint and builds the model it describes.

    :param config: Expected configuration; a shape mismatch raises IncompatibleDonorError.
    """
    return read_checkpoint(path).to_model(config)
