"""
Flat binary tensor records.

Layout (all integers little-endian):

    b"DJTD" | u32 format version
    repeated until EOF:
        u32 name length | UTF-8 name | u8 code | u32 tensor count
        per tensor: u32 ndim | u32 dims... | f64 payload (row-major)

Parameter checkpoints store one record per ParamGroup with the gate as code;
corpus splits reuse the same encoding with the example kind as code.
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .autodiff import AdamOptimizer, AdamSlot, Gate, ParamGroup, param_key
from .errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DJTD"
FORMAT_VERSION = 1


@dataclass
class Record:
    name: str
    code: int
    tensors: List[np.ndarray] = field(default_factory=list)


def encode_records(records: Sequence[Record]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for record in records:
        name = record.name.encode("utf-8")
        if not 0 <= record.code <= 255:
            raise CheckpointError(f"record {record.name!r} code {record.code} does not fit in u8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<BI", record.code, len(record.tensors)))
        for tensor in record.tensors:
            array = np.asarray(tensor, dtype=np.float64)
            chunks.append(struct.pack("<I", array.ndim))
            chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
            chunks.append(np.ascontiguousarray(array).astype("<f8").tobytes())
    return b"".join(chunks)


def decode_records(payload: bytes) -> List[Record]:
    view = memoryview(payload)
    offset = 0

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {offset}")
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a DJTD file (bad magic)")
    offset = 4
    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")

    records = []
    while offset < len(view):
        (name_length,) = take("<I")
        if offset + name_length > len(view):
            raise CheckpointError(f"truncated record name at byte {offset}")
        name = bytes(view[offset:offset + name_length]).decode("utf-8")
        offset += name_length
        code, count = take("<BI")
        tensors = []
        for _ in range(count):
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            end = offset + 8 * size
            if end > len(view):
                raise CheckpointError(f"truncated tensor payload in record {name!r}")
            tensors.append(np.frombuffer(view[offset:end], dtype="<f8").astype(np.float64).reshape(shape))
            offset = end
        records.append(Record(name, code, tensors))
    return records


def write_records(path: str, records: Sequence[Record]):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_records(records))


def read_records(path: str) -> List[Record]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_records(f.read())


# ========================================
# PARAMETER GROUPS
# ========================================

def group_records(groups: Sequence[ParamGroup]) -> List[Record]:
    return [Record(g.name, g.gate.value, [p.data for p in g.params]) for g in groups]


def save_param_groups(path: str, groups: Sequence[ParamGroup]):
    write_records(path, group_records(groups))
    logger.info(f"Saved {len(groups)} parameter groups to {path}")


def load_param_groups(path: str, groups: Sequence[ParamGroup], strict: bool = True) -> List[str]:
    """Copy stored values into `groups` in place; returns the names loaded.

    With `strict`, every group must be present in the file. Groups in the
    file that the model does not have are ignored.
    """
    stored: Dict[str, Record] = {r.name: r for r in read_records(path)}
    loaded = []
    for group in groups:
        record = stored.get(group.name)
        if record is None:
            if strict:
                raise CheckpointError(f"group {group.name!r} missing from {path}")
            continue
        if Gate.from_code(record.code) != group.gate:
            raise CheckpointError(f"group {group.name!r} stored with gate code {record.code}, "
                                  f"model expects {group.gate.name}")
        if len(record.tensors) != len(group.params):
            raise CheckpointError(f"group {group.name!r} has {len(record.tensors)} tensors, "
                                  f"model expects {len(group.params)}")
        for param, value in zip(group.params, record.tensors):
            if param.shape != value.shape:
                raise CheckpointError(f"group {group.name!r}: shape {value.shape} != {param.shape}")
            param.data = value.copy()
        loaded.append(group.name)
    return loaded


# ========================================
# OPTIMIZER STATE
# ========================================

def save_optimizer(path: str, optimizer: AdamOptimizer, groups: Sequence[ParamGroup]):
    records = []
    for group in groups:
        for i, _ in enumerate(group.params):
            key = param_key(group, i)
            slot = optimizer.slots.get(key)
            if slot is not None:
                records.append(Record(key, 0, [slot.m, slot.v, np.array([float(slot.step)])]))
    write_records(path, records)


def load_optimizer(path: str, optimizer: AdamOptimizer):
    optimizer.slots = {}
    for record in read_records(path):
        if len(record.tensors) != 3:
            raise CheckpointError(f"optimizer slot {record.name!r} is malformed")
        m, v, step = record.tensors
        optimizer.slots[record.name] = AdamSlot(m.copy(), v.copy(), int(step[0]))
