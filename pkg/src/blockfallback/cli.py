"""Command-line harness.

Every command accepts ``--config FILE`` (``key = value`` lines, ``#`` comments;
flags win over the file) and ``--out DIR``, and writes ``DIR/manifest`` with
the fully resolved configuration in the same syntax, so
``blockfallback <cmd> --config DIR/manifest`` reproduces the run.

Exit codes: 0 success, 1 verification failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gemm import (
    GemmBlockShape,
    TileShape,
    block_quant_gemm,
    compare,
    fallback_gemm,
    gemm_oracle,
    relative_frobenius,
    tiled_block_gemm,
    tiled_fallback_gemm,
)
from .matrix import GroupGeometry, MatrixFormatError, load_matrix, save_matrix
from .policy import ControllerConfig, FallbackCriterion, mask_topk, score_blocks
from .quant import dequantize, dequantize_fallback, fallback_quantize, quantize_rtn
from .synth import OutlierSpec, analyze, generate
from .trainsim import ModelConfig, QuantConfig, TaskConfig, train

log = logging.getLogger("blockfallback")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

SWEEP_HEADER = ["block_size", "bits", "method", "fallback_rate", "rmse", "max_err", "cossim", "underflow_fraction"]
TRACE_HEADER = ["step", "loss_quant", "loss_fp", "grad_cossim_mean", "fallback_rate_mean", "threshold_mean"]
CONTROLLER_HEADER = ["step", "layer", "threshold", "observed_rate"]
GEMM_CHECK_HEADER = [
    "seed", "m", "n", "k", "mask_mode", "fallback_rate", "rel_fro", "degenerate_identical", "tiling_identical", "pass"
]  # fmt: skip

GEMM_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


# -- argument types ---------------------------------------------------------


def _int_list(s: str) -> list[int]:
    return [int(v) for v in str(s).split(",") if v.strip()]


def _float_list(s: str) -> list[float]:
    return [float(v) for v in str(s).split(",") if v.strip()]


def _str_list(s: str) -> list[str]:
    return [v.strip() for v in str(s).split(",") if v.strip()]


def _index_mag(s: str) -> tuple[int, float]:
    try:
        i, m = str(s).split(":")
        return int(i), float(m)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected INDEX:MAGNITUDE, got {s!r}") from None


def _density_mag(s: str) -> tuple[float, float]:
    try:
        d, m = str(s).split(":")
        return float(d), float(m)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected DENSITY:MAGNITUDE, got {s!r}") from None


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _optional_int(s) -> int | None:
    if s is None or str(s).strip().lower() in ("none", "", "fp", "off"):
        return None
    return int(s)


# flag dest -> how a config-file string becomes a value (lists are comma separated)
_PAIR_LISTS = {"channel": _index_mag, "token": _index_mag}


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ":".join(_format_value(x) for x in v)
    if isinstance(v, list):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    return str(v)


def read_config(path: str) -> dict[str, str]:
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            k, v = (p.strip() for p in line.split("=", 1))
            out[k.replace("-", "_")] = v
    return out


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    skip = {"config", "func", "command", "verbose"}
    lines = [f"# blockfallback {__version__}", f"command = {command}"]
    for k in sorted(vars(args)):
        if k not in skip:
            lines.append(f"{k} = {_format_value(getattr(args, k))}")
    (out_dir / "manifest").write_text("\n".join(lines) + "\n")


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in values.items():
        if k == "command":
            continue
        if k not in actions:
            raise UsageError(f"unknown config key {k!r}")
        a = actions[k]
        try:
            if v.lower() == "none" and a.default is None:
                defaults[k] = None
            elif k in _PAIR_LISTS:
                defaults[k] = [_PAIR_LISTS[k](p) for p in _str_list(v)]
            elif isinstance(a, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                defaults[k] = _bool(v)
            elif a.type is not None:
                defaults[k] = a.type(v)
            else:
                defaults[k] = v
        except (ValueError, argparse.ArgumentTypeError) as e:
            raise UsageError(f"config key {k!r}: {e}") from None
    sub.set_defaults(**defaults)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _out_dir(args) -> Path:
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# -- commands ---------------------------------------------------------------


def _write_stats(out: Path, m: np.ndarray) -> None:
    stats = analyze(m)
    _write_csv(out / "stats.csv", ["metric", "value"], stats.rows())
    _write_csv(out / "sparsity.csv", ["quantile", "magnitude"], sorted(stats.sparsity.items()))


def cmd_gen(args) -> int:
    if args.glu and not (args.channel or args.token or args.occasional):
        spec = OutlierSpec.glu_default(args.rows, args.cols, args.seed, args.body_std)
    else:
        spec = OutlierSpec(
            rows=args.rows,
            cols=args.cols,
            body_std=args.body_std,
            channel_outliers=tuple(args.channel or ()),
            token_outliers=tuple(args.token or ()),
            occasional=args.occasional or (0.0, 0.0),
            glu_mode=args.glu,
            seed=args.seed,
        )
    m = generate(spec)
    out = _out_dir(args)
    save_matrix(m, out / args.name)
    _write_stats(out, m)
    write_manifest(out, "gen", args)
    log.info("wrote %s (%dx%d)", out / args.name, *m.shape)
    return EXIT_OK


def _input(args):
    # checked here rather than by argparse so a config file can supply it
    if not args.input:
        raise UsageError("--input is required")
    return load_matrix(args.input)


def cmd_analyze(args) -> int:
    m = _input(args)
    out = _out_dir(args)
    _write_stats(out, m)
    write_manifest(out, "analyze", args)
    return EXIT_OK


def quant_sweep_rows(m, block_sizes, bits_list, methods, rates, criterion):
    for bs in block_sizes:
        g = GroupGeometry(bs, bs)
        for bits in bits_list:
            for method in methods:
                if method == "naive":
                    approx = dequantize(quantize_rtn(m, g, bits), np.float64)
                    r = compare(approx, m)
                    yield (bs, bits, method, 0.0, r.rmse, r.max_abs_err, r.cosine_similarity, r.underflow_fraction)
                elif method == "fallback":
                    scores = score_blocks(m, g, bits, criterion)
                    for rate in rates:
                        fb = fallback_quantize(m, g, bits, mask_topk(scores, rate))
                        r = compare(dequantize_fallback(fb, np.float64), m)
                        yield (bs, bits, method, float(rate), r.rmse, r.max_abs_err, r.cosine_similarity, r.underflow_fraction)
                else:
                    raise UsageError(f"unknown method {method!r} (expected naive or fallback)")


def cmd_quant_sweep(args) -> int:
    m = _input(args)
    criterion = FallbackCriterion(args.criterion)
    rows = list(quant_sweep_rows(m, args.block_sizes, args.bits, args.methods, args.rates, criterion))
    out = _out_dir(args)
    _write_csv(out / "quant_sweep.csv", SWEEP_HEADER, rows)
    write_manifest(out, "quant-sweep", args)
    return EXIT_OK


def _check_mask(mode: str, rate: float, scores: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if mode == "zero":
        return np.zeros(scores.shape, dtype=bool)
    if mode == "all":
        return np.ones(scores.shape, dtype=bool)
    if mode == "random":
        return rng.random(scores.shape) < rate
    if mode == "absmax":
        return mask_topk(scores, rate)
    raise UsageError(f"unknown mask mode {mode!r}")


def gemm_check_case(m, n, k, mode, rate, seed, block, tile, workers=1, outlier_scale=1000.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, k))
    # sparse large entries so fallback blocks matter
    hits = rng.random((m, k)) < 1e-3
    a[hits] *= outlier_scale
    b = rng.standard_normal((k, n))
    shape = GemmBlockShape.square(block)
    ga = shape.a_geometry
    mask = _check_mask(mode, rate, score_blocks(a, ga, 8), rng)
    fa = fallback_quantize(a, ga, 8, mask)
    qb = quantize_rtn(b, shape.b_geometry, 8)
    out = fallback_gemm(fa, qb, shape, workers=workers)
    rel = relative_frobenius(out, gemm_oracle(dequantize_fallback(fa, np.float64), dequantize(qb, np.float64)))
    degenerate = True
    if not mask.any():
        degenerate = bool(np.array_equal(out, block_quant_gemm(fa.primary, qb, shape)))
    tiled = True
    if tile:
        t = TileShape.square(tile)
        tiled = bool(np.array_equal(tiled_block_gemm(fa.primary, qb, shape, t), block_quant_gemm(fa.primary, qb, shape)))
        tiled &= bool(np.array_equal(tiled_fallback_gemm(fa, qb, shape, t), out))
    ok = rel <= GEMM_TOLERANCE and degenerate and tiled
    return (seed, m, n, k, mode, float(mask.mean()), rel, degenerate, tiled, ok)


def cmd_gemm_check(args) -> int:
    if len(args.dims) != 3:
        raise UsageError("--dims takes M,N,K")
    m, n, k = args.dims
    rows = [
        gemm_check_case(m, n, k, args.mask_mode, args.rate, s, args.block, args.tile, args.workers)
        for s in args.seeds
    ]
    out = _out_dir(args)
    _write_csv(out / "gemm_check.csv", GEMM_CHECK_HEADER, rows)
    write_manifest(out, "gemm-check", args)
    failed = [r for r in rows if not r[-1]]
    for r in rows:
        print(f"{'PASS' if r[-1] else 'FAIL'} seed={r[0]} {m}x{n}x{k} mask={r[4]} rate={r[5]:.3f} rel_fro={r[6]:.3e}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_train(args) -> int:
    model_cfg = ModelConfig(dim=args.dim, hidden=args.hidden, n_blocks=args.blocks, seed=args.seed)
    task_cfg = TaskConfig(
        steps=args.steps,
        batch=args.batch,
        lr=args.lr,
        noise_std=args.noise_std,
        outlier_channels=args.outlier_channels,
        outlier_scale=args.outlier_scale,
        data_seed=args.data_seed,
    )
    if args.passthrough:
        quant = QuantConfig.passthrough()
    else:
        quant = QuantConfig(
            block=args.block,
            x_bits=args.x_bits,
            w_bits=args.w_bits,
            grad_bits=args.grad_bits,
            fallback=args.fallback,
            fallback_rate=args.fallback_rate,
            controller=ControllerConfig(args.r_min, args.r_max, args.alpha),
            context_bits=args.context_bits,
            seed=args.quant_seed,
            workers=args.workers,
        )
    report = train(model_cfg, task_cfg, quant)
    out = _out_dir(args)
    _write_csv(out / "train_trace.csv", TRACE_HEADER, report.trace_rows())
    _write_csv(out / "controller_trace.csv", CONTROLLER_HEADER, report.controller_trace)
    _write_csv(out / "grad_report.csv", ["parameter", "grad_cossim"], sorted(report.final_cossim().items()))
    summary = [
        ("eval_loss_quant", report.eval_loss_quant),
        ("eval_loss_fp", report.eval_loss_fp),
        ("diverged_at", -1 if report.diverged_at is None else report.diverged_at),
    ]
    _write_csv(out / "summary.csv", ["metric", "value"], summary)
    write_manifest(out, "train", args)
    if report.diverged_at is not None:
        log.warning("quantized model diverged at step %d", report.diverged_at)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockfallback", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    subs = p.add_subparsers(dest="command", required=True)

    def sub(name, func, help):
        s = subs.add_parser(name, help=help)
        s.add_argument("--config", help="key = value file; flags override it")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        s.set_defaults(func=func)
        return s

    s = sub("gen", cmd_gen, "generate a synthetic activation matrix")
    s.add_argument("--rows", type=int, default=1024)
    s.add_argument("--cols", type=int, default=1024)
    s.add_argument("--body-std", type=float, default=1.0)
    s.add_argument("--channel", type=_index_mag, action="append", metavar="COL:MAG")
    s.add_argument("--token", type=_index_mag, action="append", metavar="ROW:MAG")
    s.add_argument("--occasional", type=_density_mag, metavar="DENSITY:MAG")
    s.add_argument("--glu", action="store_true", help="silu(x1)*x2 generation")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--name", default="matrix.fmat")

    s = sub("analyze", cmd_analyze, "outlier statistics of a .fmat matrix")
    s.add_argument("--input", help=".fmat matrix (required; may come from --config)")

    s = sub("quant-sweep", cmd_quant_sweep, "quantization error over block sizes, bits, methods and rates")
    s.add_argument("--input", help=".fmat matrix (required; may come from --config)")
    s.add_argument("--block-sizes", type=_int_list, default=[32, 64, 128])
    s.add_argument("--bits", type=_int_list, default=[8])
    s.add_argument("--methods", type=_str_list, default=["naive", "fallback"])
    s.add_argument("--rates", type=_float_list, default=[0.0, 0.1, 0.2, 0.3])
    s.add_argument("--criterion", default="absmax", choices=[c.value for c in FallbackCriterion])

    s = sub("gemm-check", cmd_gemm_check, "verify fallback GEMM against the oracle")
    s.add_argument("--dims", type=_int_list, default=[256, 256, 256], metavar="M,N,K")
    s.add_argument("--mask-mode", default="random", choices=["zero", "all", "random", "absmax"])
    s.add_argument("--rate", type=float, default=0.2)
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.add_argument("--block", type=int, default=128)
    s.add_argument("--tile", type=int, default=0, help="also check tiling at this tile side")
    s.add_argument("--workers", type=int, default=1)

    s = sub("train", cmd_train, "paired quantized / full-precision toy training")
    s.add_argument("--steps", type=int, default=TaskConfig.steps)
    s.add_argument("--batch", type=int, default=TaskConfig.batch)
    s.add_argument("--lr", type=float, default=TaskConfig.lr)
    s.add_argument("--noise-std", type=float, default=TaskConfig.noise_std)
    s.add_argument("--outlier-channels", type=int, default=TaskConfig.outlier_channels)
    s.add_argument("--outlier-scale", type=float, default=TaskConfig.outlier_scale)
    s.add_argument("--data-seed", type=int, default=TaskConfig.data_seed)
    s.add_argument("--dim", type=int, default=ModelConfig.dim)
    s.add_argument("--hidden", type=int, default=ModelConfig.hidden)
    s.add_argument("--blocks", type=int, default=ModelConfig.n_blocks)
    s.add_argument("--seed", type=int, default=ModelConfig.seed, help="model initialization seed")
    s.add_argument("--passthrough", type=_bool, default=False, help="disable all quantization")
    s.add_argument("--block", type=int, default=QuantConfig.block)
    s.add_argument("--x-bits", type=int, default=QuantConfig.x_bits)
    s.add_argument("--w-bits", type=int, default=QuantConfig.w_bits)
    s.add_argument("--grad-bits", type=int, default=QuantConfig.grad_bits)
    s.add_argument("--fallback", default="threshold", choices=["threshold", "topk", "none"])
    s.add_argument("--fallback-rate", type=float, default=QuantConfig.fallback_rate)
    s.add_argument("--r-min", type=float, default=ControllerConfig.r_min)
    s.add_argument("--r-max", type=float, default=ControllerConfig.r_max)
    s.add_argument("--alpha", type=float, default=ControllerConfig.alpha)
    s.add_argument("--context-bits", type=_optional_int, default=QuantConfig.context_bits)
    s.add_argument("--quant-seed", type=int, default=QuantConfig.seed, help="stochastic rounding seed")
    s.add_argument("--workers", type=int, default=1)
    return p


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, read_config(args.config))
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = _parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    if not args.verbose:
        log.setLevel(logging.WARNING)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, MatrixFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
