"""Binary file formats: model checkpoints (``PITC``) and raw matrices (``PITM``).

All integers and tensors are little-endian; tensors are row-major.

PITM (embedding file)::

    magic  b"PITM"        4 bytes
    version u32
    rows    u64
    cols    u64
    dtype   u32            0 = float32, 1 = float64
    payload rows*cols*itemsize bytes

PITC (checkpoint)::

    magic      b"PITC"
    version    u32
    head_mode  u8          0 = TT, 1 = PIT
    mode       u8          0 = scratch, 1 = teacher
    flags      u16         bit 0: head only
    digest     32 bytes    sha256 of the config JSON below
    config_len u32, config JSON (utf-8)
    n_tensors  u32
    table      n_tensors x {name_len u16, name, dtype u8, ndim u8, dims u64[ndim], offset u64}
    payload    tensors back to back; offsets are relative to the payload start

A PIT checkpoint stores ``z``, the log-diagonal and the strict-lower vector,
never a materialized embedding or unembedding.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import FormatError, HeadOnlyCheckpoint
from .interface import PitHead, SharedTokenMemory, SpdTransform, TtHead, retract_matrix
from .model import ModelConfig, ToyTransformer

CKPT_MAGIC = b"PITC"
MATRIX_MAGIC = b"PITM"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
HEAD_ONLY = 1

Z_ACCEPT = 1e-4
Z_REPAIR = 1e-2


def _dtype_code(dtype) -> int:
    try:
        return _DTYPE_CODES[np.dtype(dtype)]
    except KeyError:
        raise FormatError(f"unsupported dtype {dtype}") from None


def atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- PITM --------------------------------------------------------------------

def write_matrix(path, matrix, dtype="float32"):
    m = np.ascontiguousarray(matrix, dtype=_DTYPES[_dtype_code(dtype)])
    if m.ndim != 2:
        raise FormatError("embedding files hold 2-D matrices")
    header = MATRIX_MAGIC + struct.pack("<IQQI", VERSION, m.shape[0], m.shape[1], _dtype_code(dtype))
    atomic_write(path, header + m.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 28 or raw[:4] != MATRIX_MAGIC:
        raise FormatError(f"{path}: not a PITM file")
    version, rows, cols, code = struct.unpack_from("<IQQI", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype flag {code}")
    dt = _DTYPES[code]
    payload = raw[28:]
    if len(payload) != rows * cols * dt.itemsize:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header declares {rows}x{cols} {dt}")
    return np.frombuffer(payload, dtype=dt).reshape(rows, cols).astype(dt.newbyteorder("="))


# -- PITC --------------------------------------------------------------------

@dataclass
class TensorEntry:
    name: str
    dtype: np.dtype
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class Checkpoint:
    head_mode: str
    mode: str
    head_only: bool
    config: dict
    digest: bytes
    table: list[TensorEntry] = field(default_factory=list)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def head_payload_size(self) -> int:
        return sum(e.size for e in self.table if e.name.startswith("head."))


def _config_bytes(config: dict) -> bytes:
    return json.dumps(config, sort_keys=True).encode("utf-8")


def encode_checkpoint(tensors: dict[str, np.ndarray], config: dict, head_mode: str, mode: str,
                      head_only: bool) -> bytes:
    cfg = _config_bytes(config)
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IBBH", VERSION, 1 if head_mode == "PIT" else 0,
                          1 if mode == "teacher" else 0, HEAD_ONLY if head_only else 0))
    buf.write(hashlib.sha256(cfg).digest())
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        code = _dtype_code(arr.dtype)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(struct.pack("<Q", offset))
        blobs.append(data)
        offset += len(data)
    for b in blobs:
        buf.write(b)
    return buf.getvalue()


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    try:
        if raw[:4] != CKPT_MAGIC:
            raise FormatError(f"{source}: not a PITC checkpoint")
        version, head_code, mode_code, flags = struct.unpack_from("<IBBH", raw, 4)
        if version != VERSION:
            raise FormatError(f"{source}: unsupported version {version}")
        pos = 12
        digest = raw[pos:pos + 32]
        pos += 32
        (cfg_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        cfg = raw[pos:pos + cfg_len]
        pos += cfg_len
        if hashlib.sha256(cfg).digest() != digest:
            raise FormatError(f"{source}: config digest mismatch")
        config = json.loads(cfg.decode("utf-8"))
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        table = []
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nl].decode("utf-8")
            pos += nl
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            if code not in _DTYPES:
                raise FormatError(f"{source}: tensor {name} has unknown dtype {code}")
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            table.append(TensorEntry(name, _DTYPES[code], tuple(shape), offset))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: truncated or corrupt header ({exc})") from exc
    payload = memoryview(raw)[pos:]
    expected = sum(e.size * e.dtype.itemsize for e in table)
    if len(payload) != expected:
        raise FormatError(f"{source}: payload is {len(payload)} bytes, table declares {expected}")
    tensors = {}
    for e in table:
        nbytes = e.size * e.dtype.itemsize
        chunk = payload[e.offset:e.offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{source}: tensor {e.name} runs past the payload")
        tensors[e.name] = np.frombuffer(chunk, dtype=e.dtype).reshape(e.shape).astype(e.dtype.newbyteorder("="))
    return Checkpoint(
        head_mode="PIT" if head_code else "TT",
        mode="teacher" if mode_code else "scratch",
        head_only=bool(flags & HEAD_ONLY),
        config=config,
        digest=digest,
        table=table,
        tensors=tensors,
    )


def _head_mode_of(head) -> tuple[str, str]:
    if isinstance(head, PitHead):
        return "PIT", head.mode
    return "TT", "scratch"


def save_model(path, model: ToyTransformer, meta: dict | None = None):
    tensors = {name: t.data for name, t in model.named_tensors().items()}
    config = {"model": model.config.to_dict(), "meta": meta or {}}
    head_mode, mode = _head_mode_of(model.head)
    atomic_write(path, encode_checkpoint(tensors, config, head_mode, mode, head_only=False))


def save_head(path, head, meta: dict | None = None):
    tensors = {name: t.data for name, t in head.named_tensors().items()}
    head_mode, mode = _head_mode_of(head)
    config = {"head": {"vocab_size": head.vocab_size, "d_model": head.dim, "head_mode": head_mode,
                       "trainable_z": bool(head_mode == "PIT" and not head.memory.frozen)},
              "meta": meta or {}}
    atomic_write(path, encode_checkpoint(tensors, config, head_mode, mode, head_only=True))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such checkpoint")
    return decode_checkpoint(path.read_bytes(), str(path))


def _require(tensors: dict, name: str, shape: tuple) -> np.ndarray:
    if name not in tensors:
        raise FormatError(f"checkpoint is missing tensor {name}")
    if tuple(tensors[name].shape) != tuple(shape):
        raise FormatError(f"tensor {name} has shape {tensors[name].shape}, expected {shape}")
    return tensors[name]


def canonical_memory(z: np.ndarray) -> np.ndarray:
    """Accept, re-orthonormalize, or reject a stored token memory."""
    defect = linalg.orthonormality_defect(z)
    if defect <= Z_ACCEPT:
        return np.asarray(z, dtype=np.float64)
    if defect <= Z_REPAIR:
        return retract_matrix(z)
    raise FormatError(f"stored token memory is far from orthonormal (defect {defect:.3e})")


def head_from_checkpoint(ckpt: Checkpoint, dtype=None, trainable_z: bool | None = None):
    if ckpt.head_only:
        info = ckpt.config["head"]
        v, d = info["vocab_size"], info["d_model"]
        tz = info.get("trainable_z", False)
    else:
        info = ckpt.config["model"]
        v, d = info["vocab_size"], info["d_model"]
        tz = info.get("trainable_z", False)
        dtype = dtype or info.get("dtype")
    if trainable_z is not None:
        tz = trainable_z
    t = ckpt.tensors
    if ckpt.head_mode == "PIT":
        z = _require(t, "head.z", (v, d))
        dtype = np.dtype(dtype or z.dtype)
        memory = SharedTokenMemory(canonical_memory(z), frozen=not tz, dtype=dtype)
        transform = SpdTransform(d, dtype=dtype)
        transform.log_diag.data[:] = _require(t, "head.log_diag", (d,))
        transform.strict_lower.data[:] = _require(t, "head.strict_lower", (d * (d - 1) // 2,))
        return PitHead(memory, transform, mode=ckpt.mode)
    e = _require(t, "head.e", (v, d))
    return TtHead(e, dtype=np.dtype(dtype or e.dtype))


def model_from_checkpoint(ckpt: Checkpoint) -> ToyTransformer:
    if ckpt.head_only:
        raise HeadOnlyCheckpoint("checkpoint holds only the token interface")
    config = ModelConfig.from_dict(ckpt.config["model"])
    model = ToyTransformer(config, head=head_from_checkpoint(ckpt))
    for name, tensor in model.named_tensors().items():
        if name.startswith("head."):
            continue
        tensor.data[...] = _require(ckpt.tensors, name, tensor.shape)
    return model


def load(path):
    """Model for full checkpoints, head for head-only ones."""
    ckpt = read_checkpoint(path)
    return head_from_checkpoint(ckpt) if ckpt.head_only else model_from_checkpoint(ckpt)
