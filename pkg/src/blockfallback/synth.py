"""Synthetic activations with structured and occasional outliers, and the
token/channel/other outlier statistics used to describe them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .matrix import dense

SPARSITY_QUANTILES = (0.5, 0.9, 0.99, 0.999, 0.9999, 1.0)


@dataclass(frozen=True)
class OutlierSpec:
    rows: int
    cols: int
    body_std: float = 1.0
    channel_outliers: tuple[tuple[int, float], ...] = ()
    token_outliers: tuple[tuple[int, float], ...] = ()
    occasional: tuple[float, float] = (0.0, 0.0)
    glu_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.body_std < 0:
            raise ValueError("body_std must be non-negative")
        for c, mag in self.channel_outliers:
            if not 0 <= c < self.cols or mag < 0:
                raise ValueError(f"bad channel outlier ({c}, {mag})")
        for r, mag in self.token_outliers:
            if not 0 <= r < self.rows or mag < 0:
                raise ValueError(f"bad token outlier ({r}, {mag})")
        density, mag = self.occasional
        if not 0.0 <= density <= 1.0 or mag < 0:
            raise ValueError(f"bad occasional outlier spec {self.occasional}")

    @property
    def occasional_count(self) -> int:
        return round(self.occasional[0] * self.rows * self.cols)

    @classmethod
    def glu_default(cls, rows: int = 2048, cols: int = 1024, seed: int = 0, body_std: float = 1.0) -> "OutlierSpec":
        """GLU-style activations: a few hot channels, one hot token, rare occasional outliers.

        Magnitudes are typical of an 8B-parameter decoder's MLP input (token ~600,
        channel ~120, others ~150). Hot channel positions are drawn from ``seed``.
        """
        rng = np.random.default_rng([seed, 0x6C75])
        n_ch = max(1, cols // 512)
        chans = sorted(int(c) for c in rng.choice(cols, size=n_ch, replace=False))
        mags = rng.uniform(80.0, 160.0, size=n_ch)
        return cls(
            rows=rows,
            cols=cols,
            body_std=body_std,
            channel_outliers=tuple((c, float(m)) for c, m in zip(chans, mags)),
            token_outliers=((int(rng.integers(rows)), 600.0),),
            occasional=(2e-5, 150.0),
            glu_mode=True,
            seed=seed,
        )


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _structured(spec: OutlierSpec) -> list[tuple[str, int, float]]:
    lines = [("col", c, m) for c, m in spec.channel_outliers] + [("row", r, m) for r, m in spec.token_outliers]
    # larger magnitudes are applied last so they win at row/column crossings
    return sorted(lines, key=lambda t: t[2])


def _occasional_positions(spec: OutlierSpec, rng: np.random.Generator) -> np.ndarray:
    free = np.ones((spec.rows, spec.cols), dtype=bool)
    for c, _ in spec.channel_outliers:
        free[:, c] = False
    for r, _ in spec.token_outliers:
        free[r, :] = False
    candidates = np.flatnonzero(free)
    n = spec.occasional_count
    if n > candidates.size:
        raise ValueError(f"{n} occasional outliers do not fit in {candidates.size} free cells")
    return np.sort(rng.choice(candidates, size=n, replace=False))


def generate(spec: OutlierSpec) -> np.ndarray:
    """Deterministic synthetic activation matrix for ``spec``.

    Additive mode draws a Gaussian body and overwrites outlier cells with
    ``+-magnitude``.  GLU mode returns ``body_std * silu(x1) * x2`` where both
    Gaussian factors are multiplied by ``sqrt(magnitude)`` on outlier cells.
    """
    rng = np.random.default_rng(spec.seed)
    shape = (spec.rows, spec.cols)
    lines = _structured(spec)

    if not spec.glu_mode:
        out = rng.standard_normal(shape) * spec.body_std
        for kind, idx, mag in lines:
            n = spec.rows if kind == "col" else spec.cols
            vals = mag * rng.choice([-1.0, 1.0], size=n)
            if kind == "col":
                out[:, idx] = vals
            else:
                out[idx, :] = vals
        pos = _occasional_positions(spec, rng)
        out.flat[pos] = spec.occasional[1] * rng.choice([-1.0, 1.0], size=pos.size)
        return dense(out)

    x1 = rng.standard_normal(shape)
    x2 = rng.standard_normal(shape)
    gain = np.ones(shape)
    for kind, idx, mag in lines:
        if kind == "col":
            gain[:, idx] = math.sqrt(mag)
        else:
            gain[idx, :] = math.sqrt(mag)
    pos = _occasional_positions(spec, rng)
    gain.flat[pos] = math.sqrt(spec.occasional[1])
    return dense(spec.body_std * _silu(x1 * gain) * (x2 * gain))


@dataclass
class OutlierStats:
    """Outlier magnitudes at token, channel and element level.

    ``token_max``/``channel_max`` are the largest typical (median) magnitude of
    any row/column in the top 5% by L1 norm; ``*_peak`` are the raw maxima over
    those rows/columns.  ``others_max`` covers cells outside both sets.
    """

    token_max: float
    channel_max: float
    others_max: float
    token_peak: float
    channel_peak: float
    top_tokens: np.ndarray
    top_channels: np.ndarray
    sparsity: dict[float, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("token_max", self.token_max),
            ("channel_max", self.channel_max),
            ("others_max", self.others_max),
            ("token_peak", self.token_peak),
            ("channel_peak", self.channel_peak),
            ("n_top_tokens", float(self.top_tokens.size)),
            ("n_top_channels", float(self.top_channels.size)),
        ]


def top_fraction(norms: np.ndarray, fraction: float = 0.05) -> np.ndarray:
    """Indices of the ``ceil(fraction * n)`` largest norms (ties to the lower index)."""
    k = math.ceil(fraction * norms.size)
    return np.sort(np.argsort(-norms, kind="stable")[:k])


def analyze(m, fraction: float = 0.05, quantiles=SPARSITY_QUANTILES) -> OutlierStats:
    m = np.abs(dense(m).astype(np.float64))
    if m.size == 0:
        raise ValueError("cannot analyze an empty matrix")
    tokens = top_fraction(m.sum(axis=1), fraction)
    channels = top_fraction(m.sum(axis=0), fraction)
    outside = np.ones(m.shape, dtype=bool)
    outside[tokens, :] = False
    outside[:, channels] = False
    others = m[outside]
    flat = np.sort(m.ravel())
    return OutlierStats(
        token_max=float(np.median(m[tokens, :], axis=1).max()),
        channel_max=float(np.median(m[:, channels], axis=0).max()),
        others_max=float(others.max()) if others.size else 0.0,
        token_peak=float(m[tokens, :].max()),
        channel_peak=float(m[:, channels].max()),
        top_tokens=tokens,
        top_channels=channels,
        sparsity={float(q): float(np.quantile(flat, q)) for q in quantiles},
    )
