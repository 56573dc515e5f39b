"""Toy fully-quantized training: GLU MLP blocks with quantized linear layers
and compressed non-linear contexts, trained next to a full-precision twin.

Linear layers follow the INT8 recipe: forward ``Y = X W^T`` with fallback
quantization of ``X`` and round-to-nearest ``W``; the saved context is a
stochastically rounded copy of ``X``; backward quantizes ``dY`` stochastically
once and feeds it to both block GEMMs.  Non-linear ops keep full-precision
inputs/outputs and save their backward inputs as 1 x 128 group-quantized
tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .gemm import GemmBlockShape, block_quant_gemm, cosine_similarity, fallback_gemm, gemm_oracle
from .matrix import DeterministicRng, GroupGeometry
from .policy import (
    ControllerConfig,
    FallbackCriterion,
    FallbackThresholdState,
    controller_update,
    mask_threshold,
    mask_topk,
    score_blocks,
)
from .quant import dequantize, fallback_quantize, quantize_rtn, quantize_stochastic

FALLBACK_MODES = ("threshold", "topk", "none")


class ContextError(RuntimeError):
    """Backward called without a matching forward context."""


@dataclass(frozen=True)
class QuantConfig:
    """How the quantized model computes.  ``enabled=False`` is exact float math."""

    enabled: bool = True
    linear: bool = True
    block: int = 16
    x_bits: int = 8
    w_bits: int = 8
    grad_bits: int = 8
    fallback: str = "threshold"
    fallback_rate: float = 0.2
    criterion: FallbackCriterion = FallbackCriterion.ABSMAX
    controller: ControllerConfig = ControllerConfig()
    context_bits: int | None = 10
    context_group: int = 128
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.fallback not in FALLBACK_MODES:
            raise ValueError(f"fallback must be one of {FALLBACK_MODES}, got {self.fallback!r}")
        for b in (self.x_bits, self.w_bits, self.grad_bits):
            if not 2 <= b <= 8:
                raise ValueError(f"linear-layer bit-widths must be in [2, 8], got {b}")

    @classmethod
    def passthrough(cls) -> "QuantConfig":
        return cls(enabled=False)

    @property
    def quantize_linear(self) -> bool:
        return self.enabled and self.linear

    @property
    def compress_context(self) -> bool:
        return self.enabled and self.context_bits is not None


class Context:
    """Tensor saved for backward: quantized per 1 x ``group`` row segment, or kept exact."""

    def __init__(self, x: np.ndarray, bits: int | None, group: int = 128):
        if bits is None:
            self._exact = np.array(x, dtype=np.float32)
            self._q = None
        else:
            self._exact = None
            self._q = quantize_rtn(x, GroupGeometry(1, group), bits)

    @property
    def quantized(self):
        return self._q

    def value(self) -> np.ndarray:
        if self._q is None:
            return self._exact
        return dequantize(self._q, np.float64).astype(np.float32)


def _f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class QuantLinearLayer:
    """``Y = X W^T`` with per-layer delayed fallback threshold."""

    def __init__(self, weight: np.ndarray, layer_id: int, name: str = ""):
        self.weight = _f32(weight).copy()
        self.grad = np.zeros_like(self.weight)
        self.layer_id = layer_id
        self.name = name
        self.threshold_state = FallbackThresholdState()
        self.last_rate = 0.0
        self._ctx = None

    def saved_state(self) -> dict:
        """What the layer holds between forward and backward (for memory checks)."""
        return dict(self._ctx or {})

    def _mask(self, x: np.ndarray, g: GroupGeometry, q: QuantConfig) -> np.ndarray:
        grid = g.grid(*x.shape)
        if q.fallback == "none":
            return np.zeros(grid, dtype=bool)
        if q.fallback == "topk":
            return mask_topk(score_blocks(x, g, q.x_bits, q.criterion), q.fallback_rate)
        return mask_threshold(score_blocks(x, g, q.x_bits, FallbackCriterion.ABSMAX), self.threshold_state.threshold)

    def forward(self, x, q: QuantConfig, step: int = 0, track: bool = True) -> np.ndarray:
        x = _f32(x)
        if x.shape[1] != self.weight.shape[1]:
            raise ValueError(f"input width {x.shape[1]} does not match weight {self.weight.shape}")
        if not q.quantize_linear:
            self._ctx = {"mode": "exact", "x": x.copy(), "q": q, "step": step}
            return gemm_oracle(x, self.weight.T)

        g = GroupGeometry(q.block, q.block)
        shape = GemmBlockShape.square(q.block)
        mask = self._mask(x, g, q)
        fa = fallback_quantize(x, g, q.x_bits, mask)
        w_t = quantize_rtn(self.weight.T, g, q.w_bits)
        y = fallback_gemm(fa, w_t, shape, workers=q.workers)
        rng = DeterministicRng(q.seed).child(step, self.layer_id, 0)
        self._ctx = {
            "mode": "quant",
            "x": quantize_stochastic(x, g, q.x_bits, rng),
            "w_t": w_t,
            "mask": fa.mask,
            "q": q,
            "step": step,
        }
        if track:
            self.last_rate = fa.fallback_rate
        return y

    def backward(self, dy) -> np.ndarray:
        if self._ctx is None:
            raise ContextError(f"linear layer {self.name or self.layer_id}: backward without forward")
        ctx, self._ctx = self._ctx, None
        dy = _f32(dy)
        if ctx["mode"] == "exact":
            self.grad += gemm_oracle(dy.T, ctx["x"])
            return gemm_oracle(dy, self.weight)

        q = ctx["q"]
        g = GroupGeometry(q.block, q.block)
        shape = GemmBlockShape.square(q.block)
        rng = DeterministicRng(q.seed).child(ctx["step"], self.layer_id, 1)
        qdy = quantize_stochastic(dy, g, q.grad_bits, rng)
        self.grad += block_quant_gemm(qdy.T, ctx["x"], shape, workers=q.workers)
        return block_quant_gemm(qdy, ctx["w_t"].T, shape, workers=q.workers)

    def update_threshold(self, cfg: ControllerConfig) -> None:
        self.threshold_state = controller_update(self.threshold_state, self.last_rate, cfg)


class SiLU:
    def forward(self, x, q: QuantConfig):
        x = _f32(x)
        self._ctx = Context(x, q.context_bits if q.compress_context else None, q.context_group)
        x64 = x.astype(np.float64)
        return _f32(x64 * _sigmoid(x64))

    def backward(self, dy):
        ctx = getattr(self, "_ctx", None)
        if ctx is None:
            raise ContextError("SiLU backward without forward")
        self._ctx = None
        x = ctx.value().astype(np.float64)
        s = _sigmoid(x)
        return _f32(np.asarray(dy, dtype=np.float64) * s * (1.0 + x * (1.0 - s)))


class GluCombine:
    """Elementwise product of the activated gate and the up projection."""

    def forward(self, a, b, q: QuantConfig):
        bits = q.context_bits if q.compress_context else None
        self._ctx = (Context(a, bits, q.context_group), Context(b, bits, q.context_group))
        return _f32(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64))

    def backward(self, dy):
        ctx = getattr(self, "_ctx", None)
        if ctx is None:
            raise ContextError("GLU backward without forward")
        self._ctx = None
        a, b = (c.value().astype(np.float64) for c in ctx)
        dy = np.asarray(dy, dtype=np.float64)
        return _f32(dy * b), _f32(dy * a)


class RMSNorm:
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = np.ones((1, dim), dtype=np.float32)
        self.grad = np.zeros_like(self.gain)
        self.eps = eps

    def forward(self, x, q: QuantConfig):
        x = _f32(x)
        self._ctx = Context(x, q.context_bits if q.compress_context else None, q.context_group)
        x64 = x.astype(np.float64)
        rms = np.sqrt(np.mean(x64 * x64, axis=1, keepdims=True) + self.eps)
        return _f32(x64 / rms * self.gain)

    def backward(self, dy):
        ctx = getattr(self, "_ctx", None)
        if ctx is None:
            raise ContextError("RMSNorm backward without forward")
        self._ctx = None
        x = ctx.value().astype(np.float64)
        dy = np.asarray(dy, dtype=np.float64)
        rms = np.sqrt(np.mean(x * x, axis=1, keepdims=True) + self.eps)
        xhat = x / rms
        self.grad += _f32((dy * xhat).sum(axis=0, keepdims=True))
        dxhat = dy * self.gain
        return _f32((dxhat - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)) / rms)


class GluMlp:
    """Pre-norm residual block ``x + down(silu(gate(n)) * up(n))`` with ``n = rmsnorm(x)``."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, first_id: int = 0):
        self.norm = RMSNorm(dim)
        self.gate = QuantLinearLayer(rng.standard_normal((hidden, dim)) / math.sqrt(dim), first_id, "gate")
        self.up = QuantLinearLayer(rng.standard_normal((hidden, dim)) / math.sqrt(dim), first_id + 1, "up")
        self.down = QuantLinearLayer(rng.standard_normal((dim, hidden)) / math.sqrt(hidden), first_id + 2, "down")
        self.act = SiLU()
        self.combine = GluCombine()

    @property
    def linears(self) -> list[QuantLinearLayer]:
        return [self.gate, self.up, self.down]

    def forward(self, x, q: QuantConfig, step: int = 0, track: bool = True):
        n = self.norm.forward(x, q)
        h = self.combine.forward(self.act.forward(self.gate.forward(n, q, step, track), q), self.up.forward(n, q, step, track), q)
        return _f32(np.asarray(x, dtype=np.float32) + self.down.forward(h, q, step, track))

    def backward(self, dy):
        dh = self.down.backward(dy)
        da, db = self.combine.backward(dh)
        dn = self.gate.backward(self.act.backward(da)).astype(np.float64) + self.up.backward(db)
        return _f32(np.asarray(dy, dtype=np.float64) + self.norm.backward(_f32(dn)))


class ToyModel:
    def __init__(self, dim: int = 64, hidden: int = 128, n_blocks: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.blocks = [GluMlp(dim, hidden, rng, first_id=3 * i) for i in range(n_blocks)]

    @property
    def linears(self) -> list[QuantLinearLayer]:
        return [lin for b in self.blocks for lin in b.linears]

    def parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        out = []
        for i, b in enumerate(self.blocks):
            out.append((f"block{i}.norm", b.norm.gain, b.norm.grad))
            out.extend((f"block{i}.{lin.name}", lin.weight, lin.grad) for lin in b.linears)
        return out

    def zero_grad(self) -> None:
        for _, _, g in self.parameters():
            g[...] = 0.0

    def forward(self, x, q: QuantConfig, step: int = 0, track: bool = True) -> np.ndarray:
        h = _f32(x)
        for b in self.blocks:
            h = b.forward(h, q, step, track)
        return h

    def loss_and_grads(self, x, y, q: QuantConfig, step: int = 0, track: bool = True):
        """MSE loss and a dict of parameter gradients (copies)."""
        self.zero_grad()
        out = self.forward(x, q, step, track)
        diff = out.astype(np.float64) - np.asarray(y, dtype=np.float64)
        loss = float(np.mean(diff * diff))
        grad = _f32(2.0 * diff / diff.size)
        for b in reversed(self.blocks):
            grad = b.backward(grad)
        return loss, {name: g.copy() for name, _, g in self.parameters()}

    def sgd_step(self, grads: dict, lr: float) -> None:
        for name, p, _ in self.parameters():
            p -= np.float32(lr) * grads[name]

    def copy_weights_from(self, other: "ToyModel") -> None:
        for (_, p, _), (_, src, _) in zip(self.parameters(), other.parameters()):
            p[...] = src


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    hidden: int = 128
    n_blocks: int = 2
    seed: int = 0


@dataclass(frozen=True)
class TaskConfig:
    """Synthetic regression: targets from a random teacher model plus noise.

    Inputs are Gaussian tokens with a few hot channels (``outlier_channels``
    columns scaled by ``outlier_scale``) so activations carry structured outliers.
    """

    steps: int = 5000
    batch: int = 16
    lr: float = 0.05
    noise_std: float = 0.5
    outlier_channels: int = 2
    outlier_scale: float = 20.0
    teacher_seed: int = 1234
    data_seed: int = 7
    eval_tokens: int = 512
    eval_every: int = 0


class RegressionTask:
    def __init__(self, model_cfg: ModelConfig, cfg: TaskConfig):
        self.cfg = cfg
        self.dim = model_cfg.dim
        self.teacher = ToyModel(model_cfg.dim, model_cfg.hidden, model_cfg.n_blocks, cfg.teacher_seed)
        rng = np.random.default_rng([cfg.teacher_seed, 1])
        self.hot = np.sort(rng.choice(model_cfg.dim, size=min(cfg.outlier_channels, model_cfg.dim), replace=False))
        self.eval_x, self.eval_y = self._make(np.random.default_rng([cfg.data_seed, 1 << 20]), cfg.eval_tokens)

    def _make(self, rng: np.random.Generator, n: int):
        x = rng.standard_normal((n, self.dim))
        x[:, self.hot] *= self.cfg.outlier_scale
        x = _f32(x)
        y = self.teacher.forward(x, QuantConfig.passthrough()) + rng.standard_normal((n, self.dim)) * self.cfg.noise_std
        return x, _f32(y)

    def batch(self, step: int):
        return self._make(np.random.default_rng([self.cfg.data_seed, step]), self.cfg.batch)


@dataclass
class GradReport:
    loss_quant: list[float] = field(default_factory=list)
    loss_fp: list[float] = field(default_factory=list)
    grad_cossim: list[dict[str, float]] = field(default_factory=list)
    fallback_rate: list[float] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    controller_trace: list[tuple[int, str, float, float]] = field(default_factory=list)
    eval_loss_quant: float = math.nan
    eval_loss_fp: float = math.nan
    diverged_at: int | None = None

    def trace_rows(self):
        for s in range(len(self.loss_quant)):
            cos = self.grad_cossim[s]
            yield (
                s,
                self.loss_quant[s],
                self.loss_fp[s],
                float(np.mean(list(cos.values()))) if cos else math.nan,
                self.fallback_rate[s],
                self.threshold[s],
            )

    def final_cossim(self, last: int = 100) -> dict[str, float]:
        names = self.grad_cossim[0].keys() if self.grad_cossim else []
        tail = self.grad_cossim[-last:]
        return {n: float(np.mean([c[n] for c in tail])) for n in names}


def gradient_cossim(a: dict, b: dict) -> dict[str, float]:
    return {k: cosine_similarity(a[k], b[k]) for k in a}


def train(
    model_cfg: ModelConfig = ModelConfig(),
    task_cfg: TaskConfig = TaskConfig(),
    quant: QuantConfig = QuantConfig(),
    progress=None,
) -> GradReport:
    """Paired training of a quantized model and a full-precision twin.

    Both start from the same weights and see the same batches.  Each step also
    recomputes exact gradients at the quantized model's current weights for the
    per-parameter gradient cosine similarity.  The fallback thresholds are
    updated once per step from that step's observed rates.
    """
    task = RegressionTask(model_cfg, task_cfg)
    model = ToyModel(model_cfg.dim, model_cfg.hidden, model_cfg.n_blocks, model_cfg.seed)
    twin = ToyModel(model_cfg.dim, model_cfg.hidden, model_cfg.n_blocks, model_cfg.seed)
    exact = QuantConfig.passthrough()
    report = GradReport()

    for step in range(task_cfg.steps):
        x, y = task.batch(step)
        thresholds = [lin.threshold_state.threshold for lin in model.linears]
        loss_q, g_q = model.loss_and_grads(x, y, quant, step)
        if quant.enabled:
            _, g_ref = model.loss_and_grads(x, y, exact, step, track=False)
            cos = gradient_cossim(g_q, g_ref)
        else:
            cos = {k: 1.0 for k in g_q}
        loss_fp, g_fp = twin.loss_and_grads(x, y, exact, step)

        rates = [lin.last_rate for lin in model.linears] if quant.quantize_linear else [0.0] * len(model.linears)
        report.loss_quant.append(loss_q)
        report.loss_fp.append(loss_fp)
        report.grad_cossim.append(cos)
        report.fallback_rate.append(float(np.mean(rates)))
        report.threshold.append(float(np.mean(thresholds)))
        if quant.quantize_linear and quant.fallback == "threshold":
            for i, lin in enumerate(model.linears):
                report.controller_trace.append((step, f"{i}:{lin.name}", lin.threshold_state.threshold, lin.last_rate))
                lin.update_threshold(quant.controller)

        if not math.isfinite(loss_q):
            report.diverged_at = step
            break
        model.sgd_step(g_q, task_cfg.lr)
        twin.sgd_step(g_fp, task_cfg.lr)
        if progress is not None:
            progress(step, report)

    report.eval_loss_quant = evaluate(model, task.eval_x, task.eval_y, quant)
    report.eval_loss_fp = evaluate(twin, task.eval_x, task.eval_y, exact)
    return report


def evaluate(model: ToyModel, x, y, quant: QuantConfig) -> float:
    out = model.forward(x, quant, track=False)
    d = out.astype(np.float64) - y
    return float(np.mean(d * d))
