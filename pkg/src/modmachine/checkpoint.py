"""Named-tensor checkpoint archive.

Layout (all integers little-endian)::

    b"MODMCKPT"  u32 format version  u32 header length  header (UTF-8 JSON)
    then per tensor: u16 name length, name, u8 ndim, ndim x u64 dims,
                     raw float64 values in C order

The JSON header carries the network dims, encoder kind, ablation flags and
whatever training metadata the caller adds.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from typing import Any, BinaryIO

import numpy as np

from .autodiff import ParamStore, Tensor
from .context import AblationFlags
from .policy import EncoderKind, PolicyDims, PolicyParams

MAGIC = b"MODMCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_archive(fh: BinaryIO, tensors: dict[str, np.ndarray], header: dict[str, Any]) -> None:
    blob = json.dumps(header, sort_keys=True).encode()
    fh.write(MAGIC)
    fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    fh.write(blob)
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fh.write(struct.pack("<HB", len(raw), arr.ndim))
        fh.write(raw)
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_archive(fh: BinaryIO) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint archive (bad magic)")
    version, hlen = struct.unpack("<II", fh.read(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    header = json.loads(fh.read(hlen).decode())
    tensors: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(3)
        if not head:
            break
        if len(head) < 3:
            raise CheckpointError("truncated checkpoint")
        nlen, ndim = struct.unpack("<HB", head)
        name = fh.read(nlen).decode()
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        buf = fh.read(8 * count)
        if len(buf) != 8 * count:
            raise CheckpointError(f"truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    return tensors, header


def save_checkpoint(path: str | os.PathLike, params: PolicyParams, **meta: Any) -> None:
    header = {
        "dims": dataclasses.asdict(params.dims),
        "encoder": params.encoder.value,
        "ablation": dataclasses.asdict(params.flags),
        **meta,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        write_archive(fh, params.store.arrays(), header)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, requires_grad: bool = False) -> tuple[PolicyParams, dict[str, Any]]:
    with open(path, "rb") as fh:
        tensors, header = read_archive(fh)
    try:
        dims = PolicyDims(**header["dims"])
        encoder = EncoderKind(header["encoder"])
        flags = AblationFlags(**header.get("ablation", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    store = ParamStore({k: Tensor(v, requires_grad=requires_grad) for k, v in tensors.items()})
    meta = {k: v for k, v in header.items() if k not in ("dims", "encoder", "ablation")}
    return PolicyParams(dims, encoder, store, flags), meta
