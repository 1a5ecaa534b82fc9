"""EMA shadow tracking and the binary checkpoint container."""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IncompatibleArchitecture, IoError, CorruptCheckpoint, VersionMismatch
from .model import ParamMap, ParamEntry, ROLE_LEARNABLE, ROLE_STATISTIC

MAGIC = b"MSSL1"
ROLES = ("teacher", "momentum_teacher", "student", "momentum_student")
_ROLE_BYTE = {ROLE_LEARNABLE: 0, ROLE_STATISTIC: 1}
_BYTE_ROLE = {v: k for k, v in _ROLE_BYTE.items()}


@dataclass
class MomentumTracker:
    shadow: ParamMap
    alpha: float
    updates: int = 0
    source_digest: str = ""


def init_momentum(source, alpha):
    """Start a shadow at a deep copy of the source weights (updates=0)."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha {alpha} out of [0,1]")
    return MomentumTracker(shadow=source.copy(), alpha=float(alpha), updates=0,
                           source_digest=source.arch_digest)


def ema_update(tracker, source):
    """shadow <- alpha*shadow + (1-alpha)*source for learnable tensors.

    Normalization statistics are copied from the source (they are already
    running averages). Runs in float32. alpha=1 freezes the shadow entirely,
    statistics included, so that a frozen tracker really is frozen.
    """
    if not tracker.shadow.compatible_with(source):
        raise IncompatibleArchitecture("EMA source incompatible with tracker shadow")
    if tracker.alpha == 1.0:
        tracker.updates += 1
        return
    a = np.float32(tracker.alpha)
    one_minus = np.float32(1.0) - a
    for sh, src in zip(tracker.shadow.entries, source.entries):
        if sh.role == ROLE_LEARNABLE:
            sh.array = (a * sh.array + one_minus * src.array).astype(np.float32)
        else:
            sh.array = src.array.astype(np.float32, copy=True)
    tracker.updates += 1


@dataclass
class Checkpoint:
    params: ParamMap
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt, path):
    """Write the checkpoint container; trailing sha256 guards integrity."""
    meta = dict(ckpt.meta)
    meta["arch_digest"] = ckpt.params.arch_digest
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    body = bytearray()
    body += MAGIC
    body += struct.pack("<Q", len(meta_bytes))
    body += meta_bytes
    for e in ckpt.params.entries:
        name = e.name.encode()
        # note: ascontiguousarray would promote 0-d entries to shape (1,)
        arr = np.asarray(e.array, dtype=np.float32)
        body += struct.pack("<I", len(name))
        body += name
        body += struct.pack("<B", _ROLE_BYTE[e.role])
        body += struct.pack("<Q", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<Q", d)
        body += arr.tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    try:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(bytes(body) + digest)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint: {exc}")


def load_checkpoint(path):
    if not os.path.isfile(path):
        raise IoError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 32:
        raise CorruptCheckpoint("file too short")
    if blob[:4] != MAGIC[:4]:
        raise CorruptCheckpoint("bad magic bytes")
    if blob[:5] != MAGIC:
        raise VersionMismatch(f"unsupported checkpoint version {blob[4:5]!r}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpoint("content digest mismatch")
    off = len(MAGIC)

    def take(n):
        nonlocal off
        chunk = body[off:off + n]
        if len(chunk) != n:
            raise CorruptCheckpoint("truncated checkpoint body")
        off += n
        return chunk

    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(meta_len).decode())
    arch_digest = meta.pop("arch_digest", "")
    entries = []
    while off < len(body):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (role_byte,) = struct.unpack("<B", take(1))
        (rank,) = struct.unpack("<Q", take(8))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(take(count * 4), dtype="<f4").reshape(shape).copy()
        entries.append(ParamEntry(name, arr, _BYTE_ROLE[role_byte]))
    params = ParamMap(entries=entries, arch_digest=arch_digest)
    return Checkpoint(params=params, meta=meta)
