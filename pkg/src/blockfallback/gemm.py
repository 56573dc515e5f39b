"""Block-quantized GEMM, the fallback GEMM and their full-precision oracle.

Every output block ``C[i, j]`` is accumulated in float32 over ascending ``k``:
the integer product of the two code blocks is scaled by ``a_A[i, k] * a_B[k, j]``
and added; masked ``A`` blocks add a second product of their residual codes
with the same ``B`` block.  Integer block products are evaluated through
float64 BLAS, which is exact because every partial sum stays below 2**31.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .matrix import GroupGeometry, pad_to_blocks
from .quant import FallbackTensor, QuantizedTensor, level

INT32_MAX = 2**31 - 1


@dataclass(frozen=True)
class GemmBlockShape:
    m_g: int = 128
    n_g: int = 128
    k_g: int = 128

    def __post_init__(self):
        if min(self.m_g, self.n_g, self.k_g) < 1:
            raise ValueError("block sides must be >= 1")
        if self.k_g * level(8) ** 2 > INT32_MAX:
            raise ValueError(f"k_g={self.k_g} can overflow the int32 block accumulator")

    @classmethod
    def square(cls, side: int) -> "GemmBlockShape":
        return cls(side, side, side)

    @property
    def a_geometry(self) -> GroupGeometry:
        return GroupGeometry(self.m_g, self.k_g)

    @property
    def b_geometry(self) -> GroupGeometry:
        return GroupGeometry(self.k_g, self.n_g)


@dataclass(frozen=True)
class TileShape:
    m_t: int
    n_t: int
    k_t: int

    @classmethod
    def square(cls, side: int) -> "TileShape":
        return cls(side, side, side)

    def check(self, shape: GemmBlockShape) -> None:
        for t, b, name in ((self.m_t, shape.m_g, "m"), (self.n_t, shape.n_g, "n"), (self.k_t, shape.k_g, "k")):
            if t < 1 or b % t:
                raise ValueError(f"tile side {name}_t={t} does not divide block side {b}")


@dataclass(frozen=True)
class ErrorReport:
    rmse: float
    max_abs_err: float
    cosine_similarity: float
    underflow_fraction: float


def gemm_oracle(a, b) -> np.ndarray:
    """Product accumulated in float64, rounded once to float32."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def _check(qa: QuantizedTensor, qb: QuantizedTensor, shape: GemmBlockShape) -> None:
    if qa.cols != qb.rows:
        raise ValueError(f"inner dimensions differ: {qa.shape} x {qb.shape}")
    if qa.geometry != shape.a_geometry:
        raise ValueError(f"A geometry {qa.geometry} does not match block shape {shape}")
    if qb.geometry != shape.b_geometry:
        raise ValueError(f"B geometry {qb.geometry} does not match block shape {shape}")
    for q in (qa, qb):
        if q.bits > 8:
            raise ValueError(f"integer GEMM operands must be <= 8 bits, got {q.bits}")


def _int_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a @ b).astype(np.int32)


def _tiled_int_product(a: np.ndarray, b: np.ndarray, shape: GemmBlockShape, tile: TileShape) -> np.ndarray:
    # a: (rows, k_g), b: (k_g, cols); each tile product is its own integer GEMM
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.int32)
    for r in range(0, a.shape[0], tile.m_t):
        for c in range(0, b.shape[1], tile.n_t):
            acc = out[r : r + tile.m_t, c : c + tile.n_t]
            for k in range(0, shape.k_g, tile.k_t):
                acc += _int_product(a[r : r + tile.m_t, k : k + tile.k_t], b[k : k + tile.k_t, c : c + tile.n_t])
    return out


def _run(qa, qb, shape, residual=None, tile=None, workers=1):
    _check(qa, qb, shape)
    M, N = qa.rows, qb.cols
    gi, gk = qa.grid
    A = pad_to_blocks(qa.codes, shape.a_geometry).astype(np.float64)
    B = pad_to_blocks(qb.codes, shape.b_geometry).astype(np.float64)
    if residual is not None:
        mask, r_codes, r_scales = residual
        R = pad_to_blocks(r_codes, shape.a_geometry).astype(np.float64)
    mg, ng, kg = shape.m_g, shape.n_g, shape.k_g
    prod = _int_product if tile is None else (lambda x, y: _tiled_int_product(x, y, shape, tile))

    def expand(s):
        return np.repeat(np.repeat(s, mg, axis=0), ng, axis=1)

    def rows(i0: int, i1: int) -> np.ndarray:
        r = slice(i0 * mg, i1 * mg)
        C = np.zeros((r.stop - r.start, B.shape[1]), dtype=np.float32)
        for k in range(gk):
            ks = slice(k * kg, (k + 1) * kg)
            Bk = B[ks]
            scale = expand(qa.scales[i0:i1, k, None] * qb.scales[None, k, :])
            C += prod(A[r, ks], Bk).astype(np.float32) * scale
            if residual is not None and mask[i0:i1, k].any():
                hit = np.repeat(mask[i0:i1, k], mg)[:, None]
                r_scale = expand(r_scales[i0:i1, k, None] * qb.scales[None, k, :])
                C = np.where(hit, C + prod(R[r, ks], Bk).astype(np.float32) * r_scale, C)
        return C

    if workers <= 1 or gi <= 1:
        C = rows(0, gi)
    else:
        step = math.ceil(gi / workers)
        spans = [(i, min(i + step, gi)) for i in range(0, gi, step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            C = np.concatenate(list(pool.map(lambda s: rows(*s), spans)), axis=0)
    return np.ascontiguousarray(C[:M, :N])


def block_quant_gemm(qa: QuantizedTensor, qb: QuantizedTensor, shape: GemmBlockShape, workers: int = 1) -> np.ndarray:
    """Per-block integer GEMM with float32 dequantize-accumulate."""
    return _run(qa, qb, shape, workers=workers)


def fallback_gemm(fa: FallbackTensor, qb: QuantizedTensor, shape: GemmBlockShape, workers: int = 1) -> np.ndarray:
    """Block GEMM where masked ``A`` blocks also contribute their residual product."""
    grid = shape.a_geometry.grid(*fa.shape)
    if fa.mask.shape != grid:
        raise ValueError(f"mask shape {fa.mask.shape} does not match block grid {grid}")
    return _run(fa.primary, qb, shape, (fa.mask, fa.residual_codes, fa.residual_scales), workers=workers)


def tiled_block_gemm(
    qa: QuantizedTensor, qb: QuantizedTensor, shape: GemmBlockShape, tile: TileShape, workers: int = 1
) -> np.ndarray:
    """:func:`block_quant_gemm` with each block product split into tile products."""
    tile.check(shape)
    return _run(qa, qb, shape, tile=tile, workers=workers)


def tiled_fallback_gemm(fa: FallbackTensor, qb: QuantizedTensor, shape: GemmBlockShape, tile: TileShape) -> np.ndarray:
    tile.check(shape)
    return _run(fa.primary, qb, shape, (fa.mask, fa.residual_codes, fa.residual_scales), tile=tile)


def relative_frobenius(actual, reference) -> float:
    a = np.asarray(actual, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    denom = np.linalg.norm(r)
    diff = np.linalg.norm(a - r)
    if denom == 0:
        return 0.0 if diff == 0 else math.inf
    return float(diff / denom)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def compare(actual, reference) -> ErrorReport:
    a = np.asarray(actual, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {r.shape}")
    if a.size == 0:
        return ErrorReport(0.0, 0.0, 1.0, 0.0)
    d = np.abs(a - r)
    nonzero = r != 0
    under = float(np.count_nonzero(nonzero & (a == 0)) / np.count_nonzero(nonzero)) if nonzero.any() else 0.0
    return ErrorReport(
        rmse=float(np.sqrt(np.mean(d * d))),
        max_abs_err=float(d.max()),
        cosine_similarity=cosine_similarity(a, r),
        underflow_fraction=under,
    )

