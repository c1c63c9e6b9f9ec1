"""Checkpoint files.

Layout (little-endian)::

    b"NMCK"  u32 header_len  header (UTF-8 JSON, sorted keys, indented)
    records...               one per tensor, mask and adapter tensor
    u32 crc32 of everything before it

A record is ``u16 name_len, name, u8 kind, u8 dtype, u8 ndim, u32 dims[ndim],
u64 nbytes, payload``. Tensor payloads are raw little-endian arrays; mask
payloads are little-bit-order packed bitsets of the mask's shape.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ArchitectureMismatch, CorruptFileError
from .model import ModelConfig, Transformer
from .slorb import SLoRBAdapter
from .sparsity import Mask, NMPattern

MAGIC = b"NMCK"
FORMAT_VERSION = 1
KIND_TENSOR, KIND_MASK = 0, 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


@dataclass
class Checkpoint:
    model: Transformer
    step: int = 0
    seed: int = 0
    mode: str = "dense_pretrain"
    max_decay: float = 0.0
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        masks = {n: str(lin.mask.pattern) for n, lin in self.model.masked_layers().items()}
        adapters = {
            n: {"k": lin.adapter.k, "init": lin.adapter.init, "enabled": lin.adapter.enabled,
                "train_projection": lin.adapter.train_projection}
            for n, lin in self.model.linears.items() if lin.adapter is not None
        }
        return {
            "format_version": FORMAT_VERSION,
            "model_config": self.model.config.to_dict(),
            "step": self.step,
            "seed": self.seed,
            "mode": self.mode,
            "max_decay": self.max_decay,
            "masks": masks,
            "adapters": adapters,
            "extra": self.extra,
        }


def _record(name: str, kind: int, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"cannot serialise dtype {arr.dtype} for {name}")
    payload = arr.astype(_DTYPES[code], copy=False).tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BBB", kind, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", len(payload))
    return head + payload


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, indent=1).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(header)), header]
    for name in sorted(ckpt.model.all_tensors()):
        parts.append(_record(name, KIND_TENSOR, ckpt.model.all_tensors()[name].data))
    for name, lin in sorted(ckpt.model.masked_layers().items()):
        bits = np.frombuffer(lin.mask.packbits(), dtype=np.uint8)
        rec = _record(name + ".mask", KIND_MASK, bits)
        parts.append(rec)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(ckpt: Checkpoint, path) -> int:
    """Write ``ckpt`` to ``path``; returns the file's CRC32."""
    raw = to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(raw)
    return struct.unpack("<I", raw[-4:])[0]


def _read_records(raw: bytes, pos: int, end: int):
    while pos < end:
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        kind, code, ndim = struct.unpack_from("<BBB", raw, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if code not in _DTYPES or pos + nbytes > end:
            raise CorruptFileError(f"bad record {name!r}")
        arr = np.frombuffer(raw, dtype=_DTYPES[code], count=nbytes // _DTYPES[code].itemsize, offset=pos)
        pos += nbytes
        yield name, kind, arr.reshape(shape).copy()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CorruptFileError("not a checkpoint file (bad magic)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CorruptFileError("checkpoint CRC mismatch")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CorruptFileError(f"unsupported checkpoint version {header.get('format_version')}")
    config = ModelConfig(**header["model_config"])
    tensors, masks = {}, {}
    for name, kind, arr in _read_records(raw, 8 + hlen, len(raw) - 4):
        if kind == KIND_MASK:
            masks[name[: -len(".mask")]] = arr
        else:
            tensors[name] = arr
    adapter_parts = {n: tensors.pop(n) for n in list(tensors) if ".slorb." in n}
    model = Transformer.from_arrays(config, tensors)
    for name, pattern in header["masks"].items():
        lin = model.linears[name]
        lin.set_mask(Mask.unpackbits(masks[name].tobytes(), lin.weight.shape, NMPattern.parse(pattern)))
    for name, meta in header["adapters"].items():
        s = adapter_parts[name + ".slorb.S"]
        x = adapter_parts[name + ".slorb.X"]
        model.linears[name].adapter = SLoRBAdapter(
            k=meta["k"],
            S=ad.Tensor(s, requires_grad=True, dtype=s.dtype),
            X=ad.Tensor(x, requires_grad=meta["train_projection"], dtype=x.dtype),
            enabled=meta["enabled"],
            init=meta["init"],
        )
    return Checkpoint(model, header["step"], header["seed"], header["mode"], header["max_decay"], header["extra"])


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def file_crc(path) -> int:
    with open(path, "rb") as fh:
        raw = fh.read()
    return struct.unpack("<I", raw[-4:])[0]


def check_architecture(model: Transformer, config: ModelConfig) -> None:
    if model.config != config:
        diff = {k: (v, getattr(config, k)) for k, v in model.config.to_dict().items() if getattr(config, k) != v}
        raise ArchitectureMismatch(f"checkpoint architecture differs from config: {diff}")
