"""
Self-describing binary container for named tensors.

Layout: magic bytes, little-endian uint32 format version, uint64 header length, UTF-8
JSON header, then the raw little-endian tensor bytes in header order. Used for model
checkpoints, encoder weights and response-set encoding caches.
"""

import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

logger = logging.getLogger(__name__)

MAGIC = b"RCMP"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


class ContainerError(ValueError):
    """A container file is unreadable or does not match what the caller expects."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def write_container(
    path, kind: str, header: Mapping, tensors: Mapping[str, torch.Tensor]
) -> Path:
    """
    Atomically writes ``tensors`` with a JSON ``header`` (temp file + rename).
    """
    path = Path(path)
    index = []
    blobs = []
    for key, value in tensors.items():
        value = value.detach().cpu()
        if value.dtype not in _DTYPES:
            raise ContainerError(f"Unsupported dtype {value.dtype} for '{key}'", key)
        code = _DTYPES[value.dtype]
        blob = np.ascontiguousarray(value.numpy(), dtype=code).tobytes()
        index.append({"key": key, "dtype": code, "shape": list(value.shape)})
        blobs.append(blob)
    meta = json.dumps(
        {"kind": kind, "header": dict(header), "tensors": index}, sort_keys=True
    ).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(meta)))
            f.write(meta)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"Wrote {kind} container with {len(index)} tensors to {path}")
    return path


def read_container(path, kind: str) -> Tuple[Dict, "OrderedDict[str, torch.Tensor]"]:
    """
    Reads a container written by ``write_container``.

    Returns:
    - tuple[dict, OrderedDict]: the caller header and the tensors in stored order.
    """
    data = Path(path).read_bytes()
    if len(data) < _PREAMBLE.size:
        raise ContainerError(f"{path} is truncated (no preamble)")
    magic, version, meta_len = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"{path} is not a reply-compression container")
    if version != FORMAT_VERSION:
        raise ContainerError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    offset = _PREAMBLE.size
    if len(data) < offset + meta_len:
        raise ContainerError(f"{path} is truncated (header)")
    try:
        meta = json.loads(data[offset : offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path} has a corrupt header: {e}") from e
    if meta.get("kind") != kind:
        raise ContainerError(f"{path} holds a '{meta.get('kind')}', expected '{kind}'")
    offset += meta_len

    tensors = OrderedDict()
    for entry in meta["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if len(data) < offset + nbytes:
            raise ContainerError(f"{path} is truncated at '{entry['key']}'", entry["key"])
        array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        tensors[entry["key"]] = torch.from_numpy(array.reshape(entry["shape"]).copy())
        offset += nbytes
    if offset != len(data):
        raise ContainerError(f"{path} has {len(data) - offset} trailing bytes")
    return meta["header"], tensors
