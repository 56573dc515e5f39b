"""Symmetric per-group integer quantization.

Scales are AbsMax/L in float32, codes are stored as int16 whatever the
bit-width, and all-zero groups get scale 0 with zero codes.  Round-to-nearest
uses ties-to-even; stochastic rounding draws its uniforms from a
:class:`~blockfallback.matrix.DeterministicRng` at each element's row-major
linear index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .matrix import DeterministicRng, GroupGeometry, blocked, dense

MIN_BITS, MAX_BITS = 2, 16


def level(bits: int) -> int:
    """Largest code magnitude L = 2**(bits-1) - 1."""
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bit-width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    return (1 << (bits - 1)) - 1


def _expand(per_group: np.ndarray, g: GroupGeometry, rows: int, cols: int) -> np.ndarray:
    out = np.repeat(np.repeat(per_group, g.group_rows, axis=0), g.group_cols, axis=1)
    return out[:rows, :cols]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes (``rows x cols``, int16) plus one float32 scale per group."""

    codes: np.ndarray
    scales: np.ndarray
    geometry: GroupGeometry
    bits: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.scales.shape

    @property
    def T(self) -> "QuantizedTensor":
        return QuantizedTensor(
            np.ascontiguousarray(self.codes.T),
            np.ascontiguousarray(self.scales.T),
            self.geometry.transposed(),
            self.bits,
        )

    def element_scales(self) -> np.ndarray:
        return _expand(self.scales, self.geometry, self.rows, self.cols)

    def nbytes_context(self) -> int:
        """Storage in bytes at the nominal bit-width (codes) plus float32 scales."""
        return (self.codes.size * self.bits + 7) // 8 + 4 * self.scales.size


_TINY = np.nextafter(np.float32(0), np.float32(1))


def scale_from_absmax(amax: np.ndarray, bits: int) -> np.ndarray:
    """``amax / L`` in float32.

    A nonzero group whose scale would underflow to zero gets the smallest
    positive float32 instead, so it still quantizes within half a step.
    """
    s = (amax / np.float32(level(bits))).astype(np.float32)
    return np.where((amax > 0) & (s == 0), _TINY, s).astype(np.float32)


def _scales(m: np.ndarray, g: GroupGeometry, bits: int) -> np.ndarray:
    return scale_from_absmax(np.abs(blocked(m, g)).max(axis=(1, 3)), bits)


def _scaled(m: np.ndarray, scales: np.ndarray, g: GroupGeometry) -> np.ndarray:
    """Values divided by their group scale, in float64 (zero-scale groups stay zero)."""
    rows, cols = m.shape
    s = _expand(scales, g, rows, cols).astype(np.float64)
    return np.divide(m, s, out=np.zeros(m.shape, dtype=np.float64), where=s > 0)


def _finish(x: np.ndarray, scales: np.ndarray, g: GroupGeometry, bits: int) -> QuantizedTensor:
    L = level(bits)
    codes = np.clip(x, -L, L).astype(np.int16)
    codes.flags.writeable = False
    scales.flags.writeable = False
    return QuantizedTensor(codes, scales, g, bits)


def quantize_rtn(m, g: GroupGeometry, bits: int = 8) -> QuantizedTensor:
    """AbsMax group quantization with round-half-to-even."""
    m = dense(m)
    scales = _scales(m, g, bits)
    return _finish(np.rint(_scaled(m, scales, g)), scales, g, bits)


def round_stochastic(x: np.ndarray, rng: DeterministicRng, offset: int = 0) -> np.ndarray:
    """Round each element of ``x`` up with probability equal to its fractional part.

    The uniform for element ``n`` (row-major) is ``rng`` at position ``offset + n``.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = np.floor(x)
    u = rng.uniform_range(offset, x.size).reshape(x.shape)
    return lo + (u < (x - lo))


def quantize_stochastic(m, g: GroupGeometry, bits: int, rng: DeterministicRng, offset: int = 0) -> QuantizedTensor:
    """Same scales as :func:`quantize_rtn`, unbiased stochastic rounding of codes."""
    m = dense(m)
    scales = _scales(m, g, bits)
    return _finish(round_stochastic(_scaled(m, scales, g), rng, offset), scales, g, bits)


def dequantize(q: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    """``code * scale`` per element.

    The product is formed in float64, where it is exact for codes up to 16 bits;
    pass ``dtype=np.float64`` to get the exact lattice value instead of its
    float32 rounding.
    """
    out = q.codes.astype(np.float64) * q.element_scales().astype(np.float64)
    return out.astype(dtype, copy=False)


@dataclass(frozen=True, eq=False)
class FallbackTensor:
    """Primary quantization plus a second-step residual quantization on masked blocks.

    ``residual_codes`` and ``residual_scales`` are zero outside the mask.
    """

    primary: QuantizedTensor
    mask: np.ndarray
    residual_codes: np.ndarray
    residual_scales: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.primary.shape

    @property
    def geometry(self) -> GroupGeometry:
        return self.primary.geometry

    @property
    def bits(self) -> int:
        return self.primary.bits

    @property
    def residual(self) -> QuantizedTensor:
        return QuantizedTensor(self.residual_codes, self.residual_scales, self.primary.geometry, self.primary.bits)

    @property
    def fallback_rate(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def residual_block(self, i: int, j: int):
        """``(codes, scale)`` of the residual of block ``(i, j)``, or None if unmasked."""
        if not self.mask[i, j]:
            return None
        g = self.geometry
        rs = slice(i * g.group_rows, (i + 1) * g.group_rows)
        cs = slice(j * g.group_cols, (j + 1) * g.group_cols)
        return self.residual_codes[rs, cs], float(self.residual_scales[i, j])


def block_mask_shape(shape: tuple[int, int], g: GroupGeometry) -> tuple[int, int]:
    return g.grid(*shape)


def fallback_quantize(m, g: GroupGeometry, bits: int, mask) -> FallbackTensor:
    """Two-step quantization: ``Q(G)`` everywhere, plus ``Q(G - Q(G))`` on masked blocks.

    The residual is taken against the exact (float64) primary dequantization and
    quantized with round-to-nearest at the same bit-width.
    """
    m = dense(m)
    mask = np.asarray(mask, dtype=bool)
    grid = g.grid(*m.shape)
    if mask.shape != grid:
        raise ValueError(f"mask shape {mask.shape} does not match block grid {grid}")
    primary = quantize_rtn(m, g, bits)
    rows, cols = m.shape
    emask = _expand(mask, g, rows, cols)
    resid = np.where(emask, m.astype(np.float64) - dequantize(primary, np.float64), 0.0)

    L = level(bits)
    ramax = np.abs(blocked(resid, g)).max(axis=(1, 3))
    r_scales = scale_from_absmax(ramax, bits)
    s = _expand(r_scales, g, rows, cols).astype(np.float64)
    x = np.divide(resid, s, out=np.zeros_like(resid), where=s > 0)
    r_codes = np.clip(np.rint(x), -L, L).astype(np.int16)
    for a in (mask, r_codes, r_scales):
        a.flags.writeable = False
    return FallbackTensor(primary, mask, r_codes, r_scales)


def dequantize_fallback(f: FallbackTensor, dtype=np.float32) -> np.ndarray:
    out = dequantize(f.primary, np.float64) + dequantize(f.residual, np.float64)
    return out.astype(dtype, copy=False)
