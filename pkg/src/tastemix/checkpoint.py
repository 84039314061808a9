"""Versioned binary checkpoint container for every model variant.

Layout (all integers little-endian)::

    magic        8 bytes   b"TMIXCKPT"
    version      uint32    currently 1
    header_len   uint64    byte length of the JSON header
    header       UTF-8 JSON, keys sorted:
                 {"variant": str,
                  "dims": {"k", "m", "n_users", "n_items"},
                  "arrays": [{"name": str, "shape": [int, ...]}, ...]}
    payload      each array in header order, row-major float64 ("<f8")

Writing is deterministic (no timestamps), so equal parameters give equal
bytes, and loading restores arrays bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import TastemixError
from .factorization import FACTORIZATION_VARIANTS, ModelDims, init_params
from .sequence import SEQUENCE_VARIANTS, init_lstm

MAGIC = b"TMIXCKPT"
VERSION = 1


class CheckpointError(TastemixError):
    pass


def dumps(params) -> bytes:
    arrays = params.arrays()
    d = params.dims
    header = {
        "variant": params.variant,
        "dims": {"k": d.k, "m": d.m, "n_users": d.n_users, "n_items": d.n_items},
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    parts.extend(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    return b"".join(parts)


def loads(blob: bytes):
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack_from("<IQ", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[offset:offset + head_len].decode("utf-8"))
    offset += head_len
    dims = ModelDims(**header["dims"])
    variant = header["variant"]
    if variant in FACTORIZATION_VARIANTS:
        params = init_params(dims, variant)
    elif variant in SEQUENCE_VARIANTS:
        params = init_lstm(dims, variant)
    else:
        raise CheckpointError(f"unknown variant {variant!r}")
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError("truncated checkpoint payload")
        arrays[spec["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset = end
    if offset != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    params.load_arrays(arrays)
    return params


def save_checkpoint(params, path: str | Path) -> None:
    Path(path).write_bytes(dumps(params))


def load_checkpoint(path: str | Path):
    return loads(Path(path).read_bytes())
