"""Dense float32 matrices, quantization-group addressing, counter-based RNG and
the ``.fmat`` binary format.

A dense matrix is a read-only, C-contiguous 2-D ``np.float32`` array; use
:func:`dense` to validate and freeze arbitrary input.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


class MatrixFormatError(ValueError):
    """Malformed ``.fmat`` payload; ``offset`` is the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def dense(values) -> np.ndarray:
    """Return ``values`` as a frozen 2-D float32 matrix, rejecting NaN/Inf."""
    if (
        isinstance(values, np.ndarray)
        and values.dtype == np.float32
        and values.flags.c_contiguous
        and not values.flags.writeable
    ):
        arr = values
    else:
        arr = np.array(values, dtype=np.float32, order="C")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("matrix contains non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GroupGeometry:
    """Quantization group shape ``group_rows x group_cols``."""

    group_rows: int
    group_cols: int

    def __post_init__(self):
        if self.group_rows < 1 or self.group_cols < 1:
            raise ValueError(f"group sides must be >= 1, got {self.group_rows}x{self.group_cols}")

    @classmethod
    def per_tensor(cls, rows: int, cols: int) -> "GroupGeometry":
        return cls(max(rows, 1), max(cols, 1))

    @classmethod
    def per_token(cls, cols: int) -> "GroupGeometry":
        return cls(1, max(cols, 1))

    @classmethod
    def per_channel(cls, rows: int) -> "GroupGeometry":
        return cls(max(rows, 1), 1)

    @classmethod
    def per_block(cls, block_rows: int, block_cols: int | None = None) -> "GroupGeometry":
        return cls(block_rows, block_rows if block_cols is None else block_cols)

    def grid(self, rows: int, cols: int) -> tuple[int, int]:
        """Number of group rows and group columns covering a ``rows x cols`` matrix."""
        return math.ceil(rows / self.group_rows), math.ceil(cols / self.group_cols)

    def transposed(self) -> "GroupGeometry":
        return GroupGeometry(self.group_cols, self.group_rows)


class BlockIndex(NamedTuple):
    block_row: int
    block_col: int


def block_slices(shape: tuple[int, int], g: GroupGeometry, idx: BlockIndex) -> tuple[slice, slice]:
    rows, cols = shape
    gi, gj = g.grid(rows, cols)
    i, j = idx
    if not (0 <= i < gi and 0 <= j < gj):
        raise IndexError(f"block index {tuple(idx)} out of range for a {gi}x{gj} block grid")
    r0, c0 = i * g.group_rows, j * g.group_cols
    return slice(r0, min(r0 + g.group_rows, rows)), slice(c0, min(c0 + g.group_cols, cols))


def block_view(m: np.ndarray, g: GroupGeometry, idx: BlockIndex) -> np.ndarray:
    """Elements of group ``(i, j)``; edge groups are truncated to the matrix."""
    rs, cs = block_slices(m.shape, g, BlockIndex(*idx))
    return m[rs, cs]


def iter_blocks(shape: tuple[int, int], g: GroupGeometry) -> Iterator[BlockIndex]:
    gi, gj = g.grid(*shape)
    for i in range(gi):
        for j in range(gj):
            yield BlockIndex(i, j)


def pad_to_blocks(a: np.ndarray, g: GroupGeometry) -> np.ndarray:
    """Zero-pad ``a`` so both sides are multiples of the group sides."""
    gi, gj = g.grid(*a.shape)
    pr, pc = gi * g.group_rows - a.shape[0], gj * g.group_cols - a.shape[1]
    if pr == 0 and pc == 0:
        return a
    return np.pad(a, ((0, pr), (0, pc)))


def blocked(a: np.ndarray, g: GroupGeometry) -> np.ndarray:
    """View of the zero-padded matrix as ``(gi, group_rows, gj, group_cols)``."""
    p = pad_to_blocks(a, g)
    gi, gj = g.grid(*a.shape)
    return p.reshape(gi, g.group_rows, gj, g.group_cols)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


@dataclass(frozen=True)
class DeterministicRng:
    """Counter-based uniform stream: the value at position ``n`` depends only on
    ``(seed, n)``, so any evaluation order gives the same numbers."""

    seed: int

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)

    def _key(self) -> np.uint64:
        return _splitmix64(np.array([self.seed], dtype=_U64))[0]

    def bits(self, positions) -> np.ndarray:
        pos = np.asarray(positions, dtype=_U64)
        with np.errstate(over="ignore"):
            return _splitmix64(pos * _GOLDEN ^ self._key())

    def uniform(self, positions) -> np.ndarray:
        """Float64 values in ``[0, 1)`` at the given stream positions."""
        return (self.bits(positions) >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform_range(self, start: int, count: int) -> np.ndarray:
        return self.uniform(np.arange(start, start + count, dtype=_U64))

    def child(self, *keys: int) -> "DeterministicRng":
        """Independent stream derived from this seed and integer keys (e.g. step, layer)."""
        s = np.array([self.seed], dtype=_U64)
        for k in keys:
            with np.errstate(over="ignore"):
                s = _splitmix64(s ^ _splitmix64(np.array([int(k) & 0xFFFFFFFFFFFFFFFF], dtype=_U64)))
        return DeterministicRng(int(s[0]))


def save_matrix(m: np.ndarray, path: str | os.PathLike) -> None:
    m = dense(m)
    rows, cols = m.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FMAT_MAGIC, FMAT_VERSION, rows, cols))
        f.write(m.astype("<f4", copy=False).tobytes(order="C"))


def decode_matrix(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise MatrixFormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, rows, cols = _HEADER.unpack_from(buf, 0)
    if magic != FMAT_MAGIC:
        raise MatrixFormatError(f"bad magic {magic!r}", 0)
    if version != FMAT_VERSION:
        raise MatrixFormatError(f"unsupported version {version}", 4)
    expected = rows * cols * 4
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise MatrixFormatError(
            f"truncated payload: header declares {rows}x{cols} ({expected} bytes), found {payload}",
            len(buf),
        )
    if payload > expected:
        raise MatrixFormatError(f"{payload - expected} trailing bytes after payload", _HEADER.size + expected)
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(data))
    if bad.size:
        raise MatrixFormatError("non-finite value", _HEADER.size + 4 * int(bad[0]))
    out = data.astype(np.float32).reshape(rows, cols)
    out.flags.writeable = False
    return out


def load_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_matrix(f.read())
