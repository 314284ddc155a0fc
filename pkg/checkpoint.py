"""
Checkpoint Module
Versioned binary checkpoints: magic, version, config hash, then named array blobs.

Layout (little-endian):
    b"LSPK" | u32 version | 32-byte sha256 of the config text | u32 blob count
    per blob: u16 name length | name (utf-8) | u8 dtype code | u8 ndim | u32 dims... | raw data
"""

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from loguru import logger

from atomic_io import write_atomic
from errors import CheckpointError
from param_store import ParamStore

MAGIC = b"LSPK"
VERSION = 1

DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}

CONFIG_BLOB = "meta/config"
STEP_BLOB = "meta/step"


@dataclass
class Checkpoint:
    store: ParamStore
    step: int
    config_text: str
    config_hash: bytes


def _pack_blob(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array)
    code = _CODE_OF.get(array.dtype.newbyteorder("<"))
    if code is None:
        raise CheckpointError(f"Blob '{name}': unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.astype(DTYPE_CODES[code], copy=False).tobytes()


def _blobs(store: ParamStore, step: int, config_text: str) -> Dict[str, np.ndarray]:
    blobs = {
        CONFIG_BLOB: np.frombuffer(config_text.encode("utf-8"), dtype=np.uint8),
        STEP_BLOB: np.array([step], dtype=np.int64),
    }
    for name in store:
        blobs[f"param/{name}"] = store.params[name]
        blobs[f"adam_m/{name}"] = store.first_moment[name]
        blobs[f"adam_v/{name}"] = store.second_moment[name]
    return blobs


def save_checkpoint(path: Union[str, Path], store: ParamStore, config_text: str, step: int) -> Path:
    """
    Write parameters, optimizer moments, step and config (atomic)

    Args:
        path: output file
        store: parameters and moments
        config_text: serialized RunConfig
        step: completed training steps

    Returns:
        the written path
    """
    path = Path(path)
    digest = hashlib.sha256(config_text.encode("utf-8")).digest()
    blobs = _blobs(store, step, config_text)
    parts = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<I", len(blobs))]
    parts.extend(_pack_blob(name, arr) for name, arr in blobs.items())

    write_atomic(path, b"".join(parts))
    logger.info(f"Checkpoint saved: {path} (step {step}, {len(store)} parameters)")
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_blobs(data: bytes, source: str = "<checkpoint>"):
    """Header fields and the name -> array mapping of a checkpoint image"""
    reader = _Reader(data, source)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    digest = reader.take(32)
    (count,) = reader.unpack("<I")
    blobs = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{source}: blob '{name}' has unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        blobs[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).copy()
    if reader.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.pos} trailing bytes")
    return version, digest, blobs


def load_checkpoint(path: Union[str, Path], expected_hash: Optional[bytes] = None) -> Checkpoint:
    """
    Read a checkpoint back into a ParamStore

    Args:
        path: checkpoint file
        expected_hash: optional config hash the checkpoint must carry

    Returns:
        Checkpoint with the restored store, step and config text
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    _, digest, blobs = read_blobs(path.read_bytes(), str(path))

    try:
        config_text = blobs.pop(CONFIG_BLOB).tobytes().decode("utf-8")
        step = int(blobs.pop(STEP_BLOB)[0])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata blob {exc}") from exc
    if hashlib.sha256(config_text.encode("utf-8")).digest() != digest:
        raise CheckpointError(f"{path}: stored config does not match the header hash")
    if expected_hash is not None and digest != expected_hash:
        raise CheckpointError(f"{path}: checkpoint was written for a different config")

    store = ParamStore()
    for name, value in blobs.items():
        if name.startswith("param/"):
            store.register(name[len("param/"):], value)
    for name in store:
        for prefix, target in (("adam_m/", store.first_moment), ("adam_v/", store.second_moment)):
            key = prefix + name
            if key not in blobs:
                raise CheckpointError(f"{path}: missing optimizer state '{key}'")
            target[name] = blobs[key].astype(np.float64)
    store.step_count = step
    logger.debug(f"Loaded checkpoint {path} at step {step}")
    return Checkpoint(store, step, config_text, digest)
