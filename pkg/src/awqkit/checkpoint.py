"""Binary container for models, quantized checkpoints and activation sets.

See ``docs/format.md`` for the byte layout. All integers are little-endian and
every section starts on an 8-byte boundary.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from awqkit.kernels import LinearLayerPacked, inverse_scale
from awqkit.model import TinyModel
from awqkit.packing import LAYOUTS, PackedWeights
from awqkit.tensor import DTYPE, as_tensor

MAGIC = b"AWQK"
VERSION = 1

KIND_MODEL = 0
KIND_ACTIVATIONS = 1

DTYPE_FP32 = 0
DTYPE_PACKED = 1

FLAG_SIGNED = 1
FLAG_ZEROS = 2
FLAG_AWQ_SCALE = 4

_HEADER = struct.Struct("<4sHHII")  # magic, version, kind, n_tensors, meta_len
_SECTION = struct.Struct("<II")  # body length, crc32(body)
_ENTRY = struct.Struct("<BBBBBxxxI")  # dtype, layout, bits, flags, ndim, pad, group_size


class CheckpointError(Exception):
    code = 10


class HeaderError(CheckpointError):
    """Bad magic, unsupported version or malformed header."""

    code = 11


class TruncatedError(CheckpointError):
    code = 12


class ChecksumError(CheckpointError):
    code = 13


class CalibrationError(CheckpointError):
    """Activation file does not match the model it is used with."""

    code = 14


@dataclass(eq=False)
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray | None = None  # fp32 entries
    packed: PackedWeights | None = None
    scales: np.ndarray | None = None
    zeros: np.ndarray | None = None
    awq_scale: np.ndarray | None = None
    group_size: int = 0

    @property
    def is_packed(self) -> bool:
        return self.packed is not None


@dataclass(eq=False)
class ModelFile:
    kind: int
    meta: dict = field(default_factory=dict)
    tensors: list[TensorEntry] = field(default_factory=list)

    def get(self, name: str) -> TensorEntry:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)


def _pad8(n: int) -> int:
    return (-n) % 8


def _blob(b: bytes) -> bytes:
    return struct.pack("<Q", len(b)) + b


def _encode_entry(t: TensorEntry) -> bytes:
    name = t.name.encode("utf-8")
    out = [struct.pack("<H", len(name)), name]
    if t.is_packed:
        p = t.packed
        flags = (FLAG_SIGNED if p.signed else 0) | (FLAG_ZEROS if t.zeros is not None else 0)
        flags |= FLAG_AWQ_SCALE if t.awq_scale is not None else 0
        out.append(_ENTRY.pack(DTYPE_PACKED, LAYOUTS.index(p.layout), p.bits, flags, len(t.shape), t.group_size))
        out.append(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        out.append(_blob(p.payload))
        out.append(_blob(np.ascontiguousarray(t.scales, dtype="<f4").tobytes()))
        if t.zeros is not None:
            out.append(_blob(np.ascontiguousarray(t.zeros, dtype="<i4").tobytes()))
        if t.awq_scale is not None:
            out.append(_blob(np.ascontiguousarray(t.awq_scale, dtype="<f4").tobytes()))
    else:
        out.append(_ENTRY.pack(DTYPE_FP32, 0, 32, 0, len(t.shape), 0))
        out.append(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        out.append(_blob(np.ascontiguousarray(t.data, dtype="<f4").tobytes()))
    return b"".join(out)


def encode(mf: ModelFile) -> bytes:
    meta = json.dumps(mf.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, VERSION, mf.kind, len(mf.tensors), len(meta)), meta]
    parts.append(b"\0" * _pad8(_HEADER.size + len(meta)))
    for t in mf.tensors:
        body = _encode_entry(t)
        parts.append(_SECTION.pack(len(body), zlib.crc32(body)))
        parts.append(body)
        parts.append(b"\0" * _pad8(len(body)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def blob(self) -> bytes:
        (n,) = struct.unpack("<Q", self.take(8))
        return self.take(n)


def _check_consumed(r: _Reader, name: str) -> None:
    if r.pos != len(r.buf):
        raise HeaderError(f"tensor {name!r}: {len(r.buf) - r.pos} unexpected bytes at end of section")


def _decode_entry(body: bytes, index: int) -> TensorEntry:
    r = _Reader(body, f"tensor section {index}")
    (name_len,) = struct.unpack("<H", r.take(2))
    name = r.take(name_len).decode("utf-8")
    dtype, layout, bits, flags, ndim, group_size = r.unpack(_ENTRY)
    shape = tuple(int(d) for d in struct.unpack(f"<{ndim}Q", r.take(8 * ndim)))
    count = int(np.prod(shape)) if shape else 1
    if dtype == DTYPE_FP32:
        raw = r.blob()
        if len(raw) != 4 * count:
            raise HeaderError(f"tensor {name!r}: {len(raw)} data bytes for shape {shape}")
        data = np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(shape)
        _check_consumed(r, name)
        return TensorEntry(name, shape, data=data)
    if dtype != DTYPE_PACKED or layout >= len(LAYOUTS) or len(shape) != 2 or group_size == 0:
        raise HeaderError(f"tensor {name!r}: bad entry header (dtype={dtype}, layout={layout}, ndim={ndim})")
    packed = PackedWeights(LAYOUTS[layout], bits, r.blob(), shape, bool(flags & FLAG_SIGNED))
    if len(packed.payload) != packed.expected_nbytes:
        raise HeaderError(f"tensor {name!r}: payload is {len(packed.payload)} bytes, expected {packed.expected_nbytes}")
    n_groups = -(-shape[1] // group_size)
    scales = np.frombuffer(r.blob(), dtype="<f4").astype(DTYPE)
    if scales.size != shape[0] * n_groups:
        raise HeaderError(f"tensor {name!r}: {scales.size} scales for {shape[0]}x{n_groups} groups")
    zeros = None
    if flags & FLAG_ZEROS:
        zeros = np.frombuffer(r.blob(), dtype="<i4").astype(np.int32).reshape(shape[0], n_groups)
    awq_scale = None
    if flags & FLAG_AWQ_SCALE:
        awq_scale = np.frombuffer(r.blob(), dtype="<f4").astype(DTYPE)
        if awq_scale.size != shape[1]:
            raise HeaderError(f"tensor {name!r}: {awq_scale.size} channel scales for {shape[1]} inputs")
    _check_consumed(r, name)
    return TensorEntry(name, shape, packed=packed, scales=scales.reshape(shape[0], n_groups),
                       zeros=zeros, awq_scale=awq_scale, group_size=group_size)


def decode(buf: bytes) -> ModelFile:
    r = _Reader(buf, "header")
    if len(buf) < len(MAGIC) or buf[: len(MAGIC)] != MAGIC:
        if len(buf) < len(MAGIC) and MAGIC.startswith(buf):
            raise TruncatedError(f"file is {len(buf)} bytes, too short for a header")
        raise HeaderError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    magic, version, kind, n_tensors, meta_len = r.unpack(_HEADER)
    if version != VERSION:
        raise HeaderError(f"unsupported format version {version} (reader supports {VERSION})")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"metadata is not valid JSON: {exc}") from exc
    r.take(_pad8(_HEADER.size + meta_len))
    tensors = []
    for i in range(n_tensors):
        r.what = f"tensor section {i}"
        length, crc = r.unpack(_SECTION)
        body = r.take(length)
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"tensor section {i}: CRC-32 mismatch")
        r.take(_pad8(length))
        tensors.append(_decode_entry(body, i))
    if r.pos != len(buf):
        raise HeaderError(f"{len(buf) - r.pos} trailing bytes after last section")
    return ModelFile(kind=kind, meta=meta, tensors=tensors)


def write_file(path, mf: ModelFile) -> int:
    data = encode(mf)
    Path(path).write_bytes(data)
    return len(data)


def read_file(path) -> ModelFile:
    return decode(Path(path).read_bytes())


# --- models ---------------------------------------------------------------


def model_to_file(model: TinyModel, meta: dict | None = None) -> ModelFile:
    info = {"kind": "tiny_model", "dim": model.dim, "hidden": model.hidden,
            "n_blocks": model.n_blocks, "activation": "gelu"}
    info.update(meta or {})
    tensors = []
    for name in model.names:
        layer = model.layers[name]
        if isinstance(layer, LinearLayerPacked):
            tensors.append(TensorEntry(name, layer.packed.shape, packed=layer.packed, scales=layer.scales,
                                       zeros=layer.zeros, awq_scale=layer.awq_scale, group_size=layer.group_size))
        else:
            tensors.append(TensorEntry(name, tuple(layer.shape), data=np.asarray(layer, dtype=DTYPE)))
    return ModelFile(KIND_MODEL, info, tensors)


def save_model(path, model: TinyModel, meta: dict | None = None) -> int:
    return write_file(path, model_to_file(model, meta))


def _entry_to_layer(t: TensorEntry):
    if not t.is_packed:
        return t.data
    return LinearLayerPacked(t.packed, t.scales, t.zeros, inverse_scale(t.awq_scale, t.shape[1]),
                             t.group_size, t.awq_scale)


def model_from_file(mf: ModelFile) -> TinyModel:
    if mf.kind != KIND_MODEL or mf.meta.get("kind") != "tiny_model":
        raise HeaderError("file does not contain a tiny_model")
    layers = {t.name: _entry_to_layer(t) for t in mf.tensors}
    return TinyModel(dim=int(mf.meta["dim"]), hidden=int(mf.meta["hidden"]),
                     n_blocks=int(mf.meta["n_blocks"]), layers=layers)


def load_model(path) -> TinyModel:
    return model_from_file(read_file(path))


# --- activations ----------------------------------------------------------


def save_activations(path, acts: dict[str, np.ndarray], meta: dict | None = None) -> int:
    """Write named ``[tokens, channels]`` matrices in sorted name order."""
    info = {"kind": "activations"}
    info.update(meta or {})
    tensors = [TensorEntry(name, tuple(np.shape(a)), data=as_tensor(a, name=name))
               for name, a in sorted(acts.items())]
    return write_file(path, ModelFile(KIND_ACTIVATIONS, info, tensors))


def load_activations(path) -> dict[str, np.ndarray]:
    mf = read_file(path)
    if mf.kind != KIND_ACTIVATIONS:
        raise HeaderError(f"{path}: not an activation file")
    if not mf.tensors:
        raise CalibrationError(f"{path}: activation file holds no tensors")
    out = {}
    for t in mf.tensors:
        if t.is_packed or len(t.shape) != 2:
            raise HeaderError(f"{path}: entry {t.name!r} is not a 2-D fp32 matrix")
        out[t.name] = t.data
    return out


def load_calibration(path, model: TinyModel | None = None) -> dict[str, np.ndarray]:
    """Per-layer calibration activations, checked against ``model`` when given."""
    acts = load_activations(path)
    for name, a in acts.items():
        if a.shape[0] == 0:
            raise CalibrationError(f"calibration for layer {name!r} has no tokens")
    if model is not None:
        for name in model.names:
            if name not in acts:
                raise CalibrationError(f"calibration file has no entry for model layer {name!r}")
        for name, a in acts.items():
            if name not in model.layers:
                raise CalibrationError(f"calibration layer {name!r} does not exist in the model")
            want = model.dim if name.endswith("fc1") else model.hidden
            if a.shape[1] != want:
                raise CalibrationError(f"calibration layer {name!r} has {a.shape[1]} channels, expected {want}")
    return acts
