"""Binary checkpoints: a named-tensor manifest followed by a float32 payload.

Layout (little-endian throughout)::

    b"NBLN" | u32 version | u32 len + spec JSON | u32 epoch | u32 entry count
    entries: u16 len + name | u8 kind | u8 ndim | ndim * u32 dims | u64 byte offset
    u64 payload length | payload (float32)

``kind`` is 0 for trainable parameters, 1 for normalization running
statistics and 2 for optimizer state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from nablanet.models import Model, ModelSpec, build_model

MAGIC = b"NBLN"
VERSION = 1
KIND_PARAM, KIND_BUFFER, KIND_OPTIM = 0, 1, 2


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptManifestError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


@dataclass
class CheckpointEntry:
    name: str
    kind: int
    shape: tuple
    offset: int
    array: Optional[np.ndarray] = None


@dataclass
class Checkpoint:
    spec: ModelSpec
    epoch: int
    entries: list = field(default_factory=list)

    def by_kind(self, kind: int) -> dict:
        return {e.name: e.array for e in self.entries if e.kind == kind}

    @property
    def params(self) -> dict:
        return self.by_kind(KIND_PARAM)

    @property
    def buffers(self) -> dict:
        return self.by_kind(KIND_BUFFER)

    @property
    def optimizer_state(self) -> dict:
        return self.by_kind(KIND_OPTIM)


def model_buffers(model: Model) -> dict:
    out = {}
    for name, st in model.named_bn_states():
        out[f"{name}.mean"] = st.mean
        out[f"{name}.var"] = st.var
        out[f"{name}.updates"] = np.array([st.updates], dtype=np.float32)
    return out


def _apply_buffers(model: Model, buffers: dict, report: Optional[list] = None) -> None:
    for name, st in model.named_bn_states():
        mean, var, upd = (buffers.get(f"{name}.{k}") for k in ("mean", "var", "updates"))
        if mean is None or var is None or upd is None or mean.shape != st.mean.shape:
            continue
        st.mean = mean.astype(st.mean.dtype)
        st.var = var.astype(st.var.dtype)
        st.updates = int(upd[0])
        if report is not None:
            report.append(name)


def save_checkpoint(model: Model, path, epoch: int = 0, optimizer=None) -> Path:
    """Write ``model`` (and optionally optimizer state) to ``path``."""
    tensors = [(n, KIND_PARAM, t.data) for n, t in model.named_parameters()]
    tensors += [(n, KIND_BUFFER, a) for n, a in model_buffers(model).items()]
    if optimizer is not None:
        tensors += [(f"optim.{n}", KIND_OPTIM, a) for n, a in optimizer.state_arrays().items()]

    spec_bytes = model.spec.to_json().encode("utf-8")
    head = bytearray(MAGIC)
    head += struct.pack("<I", VERSION)
    head += struct.pack("<I", len(spec_bytes)) + spec_bytes
    head += struct.pack("<II", epoch, len(tensors))
    chunks, offset = [], 0
    for name, kind, arr in tensors:
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        head += struct.pack("<H", len(nb)) + nb
        head += struct.pack("<BB", kind, a.ndim)
        head += struct.pack(f"<{a.ndim}I", *a.shape)
        head += struct.pack("<Q", offset)
        chunks.append(a.tobytes())
        offset += a.nbytes
    head += struct.pack("<Q", offset)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(bytes(head))
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CorruptManifestError("checkpoint manifest ends unexpectedly")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptManifestError("checkpoint manifest ends unexpectedly")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CorruptManifestError(f"{path}: not a checkpoint (bad magic bytes)")
    r = _Reader(buf)
    r.pos = 4
    (version,) = r.take("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (spec_len,) = r.take("<I")
    try:
        spec = ModelSpec.from_json(r.bytes(spec_len).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CorruptManifestError(f"{path}: unreadable model spec ({exc})") from exc
    epoch, count = r.take("<II")
    entries = []
    for _ in range(count):
        (nlen,) = r.take("<H")
        try:
            name = r.bytes(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptManifestError(f"{path}: undecodable tensor name") from exc
        kind, ndim = r.take("<BB")
        if kind not in (KIND_PARAM, KIND_BUFFER, KIND_OPTIM):
            raise CorruptManifestError(f"{path}: tensor {name!r} has unknown kind {kind}")
        shape = r.take(f"<{ndim}I") if ndim else ()
        (offset,) = r.take("<Q")
        entries.append(CheckpointEntry(name, kind, tuple(shape), offset))
    (payload_len,) = r.take("<Q")

    expected = 0
    for e in entries:
        nbytes = 4 * int(np.prod(e.shape, dtype=np.int64))
        if e.offset != expected:
            raise CorruptManifestError(f"{path}: tensor {e.name!r} offset {e.offset} overlaps or leaves a gap")
        expected += nbytes
    if expected != payload_len:
        raise CorruptManifestError(f"{path}: manifest covers {expected} bytes, header declares {payload_len}")
    payload = buf[r.pos :]
    if len(payload) < payload_len:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} of {payload_len} bytes")
    if len(payload) > payload_len:
        raise CorruptManifestError(f"{path}: {len(payload) - payload_len} trailing bytes after payload")
    for e in entries:
        n = int(np.prod(e.shape, dtype=np.int64))
        e.array = np.frombuffer(payload, dtype="<f4", count=n, offset=e.offset).reshape(e.shape).astype(np.float32)
    return Checkpoint(spec, epoch, entries)


def load_checkpoint(path, dtype=np.float32) -> tuple:
    """Rebuild the model stored at ``path``; returns (model, checkpoint)."""
    ckpt = read_checkpoint(path)
    model = build_model(ckpt.spec, dtype)
    params = ckpt.params
    for name, t in model.named_parameters():
        if name not in params or params[name].shape != t.shape:
            raise CorruptManifestError(f"{path}: parameter {name!r} missing or misshapen")
        t.data = params[name].astype(dtype)
    _apply_buffers(model, ckpt.buffers)
    return model, ckpt


@dataclass
class TransferReport:
    loaded: list
    skipped: list
    warning: str = ""


def transfer_load(model: Model, source) -> TransferReport:
    """Copy every checkpoint tensor whose (name, shape) matches ``model``."""
    ckpt = source if isinstance(source, Checkpoint) else read_checkpoint(source)
    params = ckpt.params
    loaded, skipped = [], []
    for name, t in model.named_parameters():
        src = params.get(name)
        if src is not None and src.shape == t.shape:
            t.data = src.astype(t.dtype)
            loaded.append(name)
        else:
            skipped.append(name)
    _apply_buffers(model, ckpt.buffers)
    warning = "" if loaded else "no checkpoint tensor matched the target model"
    return TransferReport(loaded, skipped, warning)
