"""Bit-exact packed layouts for low-bit integer codes.

Layouts:

``linear``
    Codes stored back to back as a little-endian bit stream: element ``i``
    occupies bits ``[i*N, (i+1)*N)``, so for 4 bits the first element of a
    pair sits in the low nibble.
``simd128``
    Each 128-bit register (16 bytes) holds ``128 / N`` codes. Byte ``k`` of a
    register carries elements ``k, k+16, k+32, ...`` from low to high bits,
    so for 4 bits the storage order is ``w0, w16, w1, w17, ..., w15, w31`` and
    one AND plus one shift-and-AND recover both halves in lane order.
``gpu8``
    Every 8 codes are stored as ``w0, w2, w4, w6, w1, w3, w5, w7`` and then
    packed linearly.

Signed codes are stored with an offset of ``2**(N-1)`` so payload fields are
plain unsigned integers.  Padding uses the encoding of zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYOUTS = ("linear", "simd128", "gpu8")
SIMD_BYTES = 16
GPU8_ORDER = np.array([0, 2, 4, 6, 1, 3, 5, 7])


class PayloadError(ValueError):
    """Packed payload is truncated or inconsistent with its header."""


def check_layout(bits: int, layout: str) -> None:
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if layout == "linear":
        if not 2 <= bits <= 16:
            raise ValueError(f"linear layout supports 2..16 bits, got {bits}")
    elif bits not in (2, 4):
        raise ValueError(
            f"{layout} layout needs 2 or 4 bits (got {bits}); use --layout linear for {bits}-bit"
        )


def block_size(bits: int, layout: str) -> int:
    """Elements per interleave block (the padding unit)."""
    if layout == "simd128":
        return SIMD_BYTES * 8 // bits
    if layout == "gpu8":
        return 8
    return 1


def row_block(bits: int, layout: str) -> int:
    """Row padding unit for matrices: keeps every row byte aligned."""
    return 8 if layout == "linear" else block_size(bits, layout)


def simd128_permutation(bits: int = 4) -> np.ndarray:
    """``perm[j]`` is the logical index stored at position ``j`` of a register."""
    per_byte = 8 // bits
    j = np.arange(SIMD_BYTES * per_byte)
    return (j % per_byte) * SIMD_BYTES + j // per_byte


def permutation(bits: int, layout: str) -> np.ndarray | None:
    if layout == "simd128":
        return simd128_permutation(bits)
    if layout == "gpu8":
        return GPU8_ORDER
    return None


@dataclass(frozen=True, eq=False)
class PackedWeights:
    layout: str
    bits: int
    payload: bytes
    shape: tuple[int, ...]
    signed: bool = True

    @property
    def logical_len(self) -> int:
        return int(np.prod(self.shape))

    @property
    def padded_cols(self) -> int:
        cols = self.shape[-1]
        blk = row_block(self.bits, self.layout) if len(self.shape) == 2 else block_size(self.bits, self.layout)
        return -(-cols // blk) * blk

    @property
    def expected_nbytes(self) -> int:
        rows = self.shape[0] if len(self.shape) == 2 else 1
        return -(-rows * self.padded_cols * self.bits // 8)


def _encode(q: np.ndarray, bits: int, signed: bool) -> np.ndarray:
    lo, hi = (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)
    q = np.asarray(q)
    bad = np.flatnonzero((q < lo) | (q > hi))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"code {int(q.reshape(-1)[i])} at index {i} outside [{lo}, {hi}] for {bits}-bit")
    u = q.astype(np.int64)
    if signed:
        u = u + (1 << (bits - 1))
    return u.astype(np.uint32)


def _bitstream(u: np.ndarray, bits: int) -> np.ndarray:
    planes = (u.reshape(-1, 1) >> np.arange(bits, dtype=np.uint32)) & 1
    return np.packbits(planes.astype(np.uint8).reshape(-1), bitorder="little")


def _unbitstream(payload: np.ndarray, bits: int, count: int) -> np.ndarray:
    planes = np.unpackbits(payload, bitorder="little", count=count * bits).reshape(count, bits)
    return planes.astype(np.uint32) @ (np.uint32(1) << np.arange(bits, dtype=np.uint32))


def _interleave(u: np.ndarray, bits: int, layout: str) -> np.ndarray:
    perm = permutation(bits, layout)
    if perm is None:
        return u
    return u.reshape(-1, perm.size)[:, perm].reshape(-1)


def pack(q, bits: int, layout: str = "linear", signed: bool = True) -> PackedWeights:
    """Pack a 1-D or 2-D array of integer codes.

    1-D input is padded to the layout block. 2-D input is packed row by row,
    each row padded so it starts on a byte and block boundary.
    """
    check_layout(bits, layout)
    q = np.asarray(q)
    if q.ndim not in (1, 2):
        raise ValueError(f"pack expects 1-D or 2-D codes, got shape {q.shape}")
    u = _encode(q, bits, signed)
    zero = (1 << (bits - 1)) if signed else 0
    shape = tuple(int(d) for d in q.shape)
    tmpl = PackedWeights(layout, bits, b"", shape, signed)
    u2 = u.reshape(1, -1) if q.ndim == 1 else u
    pad = tmpl.padded_cols - u2.shape[1]
    if pad:
        u2 = np.pad(u2, ((0, 0), (0, pad)), constant_values=zero)
    stream = _bitstream(_interleave(u2.reshape(-1), bits, layout), bits)
    return PackedWeights(layout, bits, stream.tobytes(), shape, signed)


def decode_blocks(raw: np.ndarray, bits: int, layout: str) -> np.ndarray:
    """Decode a ``[rows, nbytes]`` uint8 array of whole blocks to unsigned codes."""
    rows, nbytes = raw.shape
    if layout == "simd128":
        regs = raw.reshape(rows, -1, SIMD_BYTES)
        if bits == 4:
            # one AND for the low lanes, one shift + AND for the high lanes
            parts = [regs & 0x0F, (regs >> 4) & 0x0F]
        else:
            mask = (1 << bits) - 1
            parts = [(regs >> (bits * m)) & mask for m in range(8 // bits)]
        return np.concatenate(parts, axis=2).reshape(rows, -1)
    count = nbytes * 8 // bits
    u = _unbitstream(np.ascontiguousarray(raw).reshape(-1), bits, rows * count)
    if layout == "gpu8":
        inv = np.argsort(GPU8_ORDER)
        u = u.reshape(-1, 8)[:, inv]
    return u.reshape(rows, count)


def _payload_array(p: PackedWeights) -> np.ndarray:
    buf = np.frombuffer(p.payload, dtype=np.uint8)
    if buf.size < p.expected_nbytes:
        raise PayloadError(f"payload has {buf.size} bytes, expected {p.expected_nbytes}")
    return buf[: p.expected_nbytes]


def _decode_signed(u: np.ndarray, p: PackedWeights) -> np.ndarray:
    v = u.astype(np.int32)
    if p.signed:
        v -= 1 << (p.bits - 1)
    return v


def unpack(p: PackedWeights) -> np.ndarray:
    """Exact inverse of :func:`pack`."""
    check_layout(p.bits, p.layout)
    buf = _payload_array(p)
    rows = p.shape[0] if len(p.shape) == 2 else 1
    cols = p.shape[-1]
    if p.layout == "linear" and len(p.shape) == 1:
        u = _unbitstream(buf, p.bits, cols).reshape(1, cols)
    else:
        u = decode_blocks(buf.reshape(rows, -1), p.bits, p.layout)
    return _decode_signed(u[:, :cols], p).reshape(p.shape)


def unpack_cols(p: PackedWeights, c0: int, c1: int) -> np.ndarray:
    """Signed codes for columns ``[c0, c1)`` of a packed matrix, ``[rows, c1 - c0]``."""
    if len(p.shape) != 2:
        raise ValueError("unpack_cols needs a packed 2-D matrix")
    blk = row_block(p.bits, p.layout)
    b0 = (c0 // blk) * blk
    b1 = min(-(-c1 // blk) * blk, p.padded_cols)
    row_bytes = p.padded_cols * p.bits // 8
    raw = _payload_array(p).reshape(p.shape[0], row_bytes)
    u = decode_blocks(raw[:, b0 * p.bits // 8 : b1 * p.bits // 8], p.bits, p.layout)
    return _decode_signed(u[:, c0 - b0 : c1 - b0], p)
