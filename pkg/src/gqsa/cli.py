"""Command-line entry point: ``gqsa {compress,tune,verify,bench,inspect,footprint,sweep}``.

Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .compress import CompressionConfig, compress_model, synthetic_layer
from .core import Activation, Block, ShapeError, ToyModel, dense_gemv, make_calibration, make_toy_model
from .engine import BENCH_COLUMNS, EngineConfig, Strategy, bench_gemv, gemv_parallel, relative_error
from .gqs import (
    BadMagicError,
    ChecksumError,
    FormatError,
    TruncatedError,
    VersionError,
    decompress,
    deserialize,
    footprint,
    footprint_for,
    serialize,
)
from .quant import quantize_rows, round_half_away
from .tune import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_BQPO_EPOCHS,
    DEFAULT_E2E_EPOCHS,
    DEFAULT_LR,
    bqpo,
    e2e_oqp,
    model_mse,
)

EXIT_IO = 1
EXIT_USAGE = 2
EXIT_VERIFY = 3

DEFAULT_BENCH_SPARSITIES = (0.0, 0.2, 0.3, 0.4, 0.5, 0.8)
DEFAULT_SWEEP_GROUPS = (8, 16, 32, 64, 128)
DEFAULT_SWEEP_SPARSITIES = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _default_threads() -> int:
    raw = os.environ.get("GQSA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _float_list(text: str) -> List[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- model flags -----------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser, rows=256, cols=256, blocks=3):
    p.add_argument("--rows", type=int, default=rows)
    p.add_argument("--cols", type=int, default=cols)
    p.add_argument("--blocks", type=int, default=blocks)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calib", type=int, default=512, help="calibration samples")


def _add_compress_flags(p: argparse.ArgumentParser):
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--bits", type=int, default=4, choices=(2, 3, 4, 8))
    p.add_argument("--group-size", type=int, default=16)


def _add_tune_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs-bqpo", type=int, default=DEFAULT_BQPO_EPOCHS)
    p.add_argument("--epochs-e2e", type=int, default=DEFAULT_E2E_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)


def _check_model_flags(args):
    if min(args.rows, args.cols, args.blocks, args.calib) < 1:
        raise UsageError("--rows, --cols, --blocks and --calib must be >= 1")
    g = getattr(args, "group_size", None)
    if g is not None:
        if g < 1:
            raise UsageError("--group-size must be >= 1")
        if args.cols % g or (args.blocks > 1 and args.rows % g):
            raise UsageError(f"--group-size {g} must divide --cols (and --rows when --blocks > 1)")
    sp = getattr(args, "sparsity", None)
    if sp is not None and not 0.0 <= sp < 1.0:
        raise UsageError("--sparsity must be in [0, 1)")


def _model_from_args(args) -> ToyModel:
    dense = getattr(args, "dense", None)
    if dense:
        return load_dense_model(dense)
    return make_toy_model(args.rows, args.cols, args.blocks, args.seed)


def _calib_from_args(args, model: ToyModel, held_out: bool = False):
    seed = args.seed + 1_000_003 if held_out else args.seed
    return make_calibration(model.in_dim, args.calib, seed, mix_seed=args.seed)


def load_dense_model(path) -> ToyModel:
    """Load a dense model from ``.npz`` holding ``weight_<i>``/``bias_<i>`` arrays."""
    with np.load(path) as data:
        blocks = []
        i = 0
        while f"weight_{i}" in data:
            bias = data[f"bias_{i}"] if f"bias_{i}" in data else np.zeros(data[f"weight_{i}"].shape[0])
            blocks.append(Block(data[f"weight_{i}"], bias, Activation.RELU))
            i += 1
    if not blocks:
        raise UsageError(f"{path}: no weight_0 array found")
    blocks[-1].activation = Activation.IDENTITY
    return ToyModel(blocks)


def _read_layers(path):
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def _write_bytes(path, blob: bytes):
    Path(path).write_bytes(blob)


def _emit_manifest(args, command: str, t0: float, outputs: dict, extra: Optional[dict] = None):
    config = {k: v for k, v in vars(args).items() if k not in ("func",) and not callable(v)}
    record = {
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": _version(),
        "wall_time": round(time.perf_counter() - t0, 6),
        "outputs": outputs,
    }
    if extra:
        record.update(extra)
    line = json.dumps(record, sort_keys=True, default=str)
    if getattr(args, "manifest", None):
        with open(args.manifest, "a") as fh:
            fh.write(line + "\n")
    else:
        print(line, file=sys.stderr)


def _csv_writer(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline=""), True


# -- commands ------------------------------------------------------------------


def cmd_compress(args) -> int:
    t0 = time.perf_counter()
    _check_model_flags(args)
    model = _model_from_args(args)
    cfg = CompressionConfig(args.sparsity, args.bits, args.group_size, args.seed)
    layers = compress_model(model, _calib_from_args(args, model), cfg, workers=args.threads)
    blob = serialize(layers)
    _write_bytes(args.output, blob)
    _emit_manifest(args, "compress", t0, {"gqs": str(args.output), "bytes": len(blob)})
    return 0


def _write_loss_csv(path, reports):
    fh, close = _csv_writer(path)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "block", "epoch", "step", "loss"])
        for rep in reports:
            for block, traj in enumerate(rep.trajectories):
                for step, loss in enumerate(traj):
                    w.writerow([rep.stage, block if rep.stage == "bqpo" else "all", step // rep.batches, step, repr(loss)])
    finally:
        if close:
            fh.close()


def cmd_tune(args) -> int:
    t0 = time.perf_counter()
    _check_model_flags(args)
    if args.batch_size < 1 or args.epochs_bqpo < 0 or args.epochs_e2e < 0:
        raise UsageError("--batch-size must be >= 1 and epochs >= 0")
    layers = _read_layers(args.input)
    model = _model_from_args(args)
    if len(layers) != len(model.blocks) or any(
        (l.rows, l.cols) != (b.out_dim, b.in_dim) for l, b in zip(layers, model.blocks)
    ):
        raise UsageError(
            f"{args.input} does not match the model regenerated from --rows/--cols/--blocks"
        )
    for layer in layers:
        if args.group_size is not None and layer.group_size != args.group_size:
            raise UsageError(f"{args.input} uses group size {layer.group_size}, not {args.group_size}")
        if args.bits is not None and layer.bits != args.bits:
            raise UsageError(f"{args.input} uses {layer.bits}-bit codes, not {args.bits}")
        if args.sparsity is not None and abs(layer.sparsity - args.sparsity) > 1.0 / layer.total_groups:
            raise UsageError(f"{args.input} has sparsity {layer.sparsity:.4f}, not {args.sparsity}")
    calib = _calib_from_args(args, model)
    held_out = _calib_from_args(args, model, held_out=True).samples
    summary = [("untuned", model_mse(model, layers, calib.samples), model_mse(model, layers, held_out))]
    reports = []
    if args.stage in ("bqpo", "both"):
        layers, rep = bqpo(model, layers, calib, args.epochs_bqpo, args.lr, args.batch_size,
                           seed=args.seed, workers=args.threads)
        reports.append(rep)
        summary.append(("bqpo", model_mse(model, layers, calib.samples), model_mse(model, layers, held_out)))
    if args.stage in ("e2e", "both"):
        layers, rep = e2e_oqp(model, layers, calib, args.epochs_e2e, args.lr, args.batch_size, seed=args.seed)
        reports.append(rep)
        summary.append(("e2e", model_mse(model, layers, calib.samples), model_mse(model, layers, held_out)))
    blob = serialize(layers)
    _write_bytes(args.output, blob)
    loss_csv = args.loss_csv or f"{args.output}.loss.csv"
    _write_loss_csv(loss_csv, reports)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["stage", "calib_mse", "eval_mse"])
    for stage, cm, em in summary:
        w.writerow([stage, repr(cm), repr(em)])
    _emit_manifest(args, "tune", t0, {"gqs": str(args.output), "loss_csv": loss_csv},
                   {"mse": {s: cm for s, cm, _ in summary}})
    return 0


_FORMAT_CHECK_NAMES = {
    ChecksumError: "crc",
    TruncatedError: "truncated",
    BadMagicError: "magic",
    VersionError: "version",
}


def verify_blob(blob: bytes, threads: int = 4, seed: int = 0):
    """Run the oracle checks on a serialized model; returns ``[(name, ok, detail)]``."""
    results = []
    try:
        layers = deserialize(blob)
    except FormatError as exc:
        name = next((n for cls, n in _FORMAT_CHECK_NAMES.items() if isinstance(exc, cls)), "format")
        return [(name, False, str(exc))]
    results.append(("format", True, f"{len(layers)} layers"))
    results.append(("roundtrip", serialize(layers) == blob, "re-serialized bytes differ"))

    bad_quant = 0
    for layer in layers:
        if not layer.nnzg:
            continue
        integral = layer.zeros == round_half_away(layer.zeros)
        if not integral.any():
            continue
        codes = layer.codes()[integral]
        s, z = layer.scales[integral], layer.zeros[integral]
        w_hat = (codes.astype(np.float32) - z[:, None]) * s[:, None]
        bad_quant += int(np.sum(quantize_rows(w_hat, s, z, layer.bits) != codes))
    results.append(("quant", bad_quant == 0, f"{bad_quant} codes change on re-quantization"))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for layer in layers:
        x = rng.standard_normal(layer.cols).astype(np.float32)
        ref = dense_gemv(decompress(layer), x) + layer.bias_or_zeros()
        for strategy in (Strategy.REFERENCE, Strategy.SLICE_K, Strategy.STREAM_K):
            for p in sorted({1, 2, max(1, threads)}):
                y, _ = gemv_parallel(layer, x, EngineConfig(p, strategy))
                worst = max(worst, relative_error(y, ref))
    results.append(("engine", worst <= 1e-4, f"max relative error {worst:.3g}"))
    return results


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    blob = Path(args.input).read_bytes()
    results = verify_blob(blob, threads=args.threads)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}" + ("" if ok else f": {detail}"))
    _emit_manifest(args, "verify", t0, {}, {"failed": failed})
    return EXIT_VERIFY if failed else 0


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    if args.reps < 3:
        raise UsageError("--reps must be >= 3")
    if args.cols % args.group_size:
        raise UsageError("--group-size must divide --cols")
    if any(not 0.0 <= s < 1.0 for s in args.sparsities):
        raise UsageError("sparsities must be in [0, 1)")
    if any(t < 1 for t in args.threads):
        raise UsageError("--threads must be >= 1")
    strategies = [Strategy(s) for s in args.strategy]
    fh, close = _csv_writer(args.output)
    try:
        w = csv.DictWriter(fh, fieldnames=list(BENCH_COLUMNS) + ["payload_bytes", "bits_per_weight", "ratio_vs_fp16", "gbps"],
                           lineterminator="\n")
        w.writeheader()
        x = np.random.default_rng([args.seed, 7]).standard_normal(args.cols).astype(np.float32)
        for sp in args.sparsities:
            layer = synthetic_layer(args.rows, args.cols, sp, args.bits, args.group_size, args.seed)
            fp = footprint(layer)
            for p in args.threads:
                for strategy in strategies:
                    rep = bench_gemv(layer, x, EngineConfig(p, strategy), reps=args.reps)
                    row = rep.row()
                    row.update(
                        payload_bytes=fp.payload_bits // 8,
                        bits_per_weight=round(fp.bits_per_weight, 6),
                        ratio_vs_fp16=round(fp.ratio_vs_fp16, 6),
                        gbps=round(rep.gbps, 6),
                    )
                    w.writerow(row)
                    fh.flush()
    finally:
        if close:
            fh.close()
    _emit_manifest(args, "bench", t0, {"csv": args.output or "-"})
    return 0


INSPECT_COLUMNS = ("layer", "rows", "cols", "G", "bits", "nnzg", "sparsity", "bits_per_weight", "ratio_vs_fp16")


def inspect_rows(layers):
    for i, layer in enumerate(layers):
        fp = footprint(layer)
        yield (i, layer.rows, layer.cols, layer.group_size, layer.bits, layer.nnzg,
               f"{layer.sparsity:.4f}", f"{fp.bits_per_weight:.4f}", f"{fp.ratio_vs_fp16:.4f}")


def cmd_inspect(args) -> int:
    t0 = time.perf_counter()
    layers = _read_layers(args.input)
    print(" ".join(f"{c:>15}" for c in INSPECT_COLUMNS))
    for row in inspect_rows(layers):
        print(" ".join(f"{str(v):>15}" for v in row))
    if layers:
        fp = footprint(layers)
        print(f"total: {len(layers)} layers, {fp.payload_bits} payload bits, "
              f"{fp.bits_per_weight:.4f} bits/weight, {fp.ratio_vs_fp16:.4f}x vs fp16")
    _emit_manifest(args, "inspect", t0, {})
    return 0


def cmd_footprint(args) -> int:
    t0 = time.perf_counter()
    if args.input:
        fp = footprint(_read_layers(args.input))
    else:
        if args.cols % args.group_size:
            raise UsageError("--group-size must divide --cols")
        if not 0.0 <= args.sparsity < 1.0:
            raise UsageError("--sparsity must be in [0, 1)")
        from .compress import pruned_count

        total = args.rows * (args.cols // args.group_size)
        fp = footprint_for(args.rows, args.cols, args.group_size, args.bits,
                           total - pruned_count(args.sparsity, total), args.bias)
    print(json.dumps(fp.as_dict(), sort_keys=True))
    _emit_manifest(args, "footprint", t0, {})
    return 0


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    _check_model_flags(args)
    if args.axis == "group-size":
        values = args.values or list(DEFAULT_SWEEP_GROUPS)
        for g in values:
            if g < 1 or args.cols % g or args.rows % g:
                raise UsageError(f"group size {g} must divide --rows and --cols")
    else:
        values = args.values or list(DEFAULT_SWEEP_SPARSITIES)
        if any(not 0.0 <= v < 1.0 for v in values):
            raise UsageError("sparsity values must be in [0, 1)")
    fh, close = _csv_writer(args.output)
    try:
        w = csv.writer(fh, lineterminator="\n")
        header = ["axis", "value", "seed", "mse"] + (["tuned_mse"] if args.tune else [])
        w.writerow(header)
        for value in values:
            g = int(value) if args.axis == "group-size" else args.group_size
            sp = args.sparsity if args.axis == "group-size" else float(value)
            for k in range(args.seeds):
                seed = args.seed + k
                model = make_toy_model(args.rows, args.cols, args.blocks, seed)
                calib = make_calibration(model.in_dim, args.calib, seed, mix_seed=seed)
                held = make_calibration(model.in_dim, args.calib, seed + 1_000_003, mix_seed=seed).samples
                layers = compress_model(model, calib, CompressionConfig(sp, args.bits, g, seed))
                row = [args.axis, value, seed, repr(model_mse(model, layers, held))]
                if args.tune:
                    layers, _ = bqpo(model, layers, calib, args.epochs_bqpo, args.lr, args.batch_size, seed=seed)
                    layers, _ = e2e_oqp(model, layers, calib, args.epochs_e2e, args.lr, args.batch_size, seed=seed)
                    row.append(repr(model_mse(model, layers, held)))
                w.writerow(row)
                fh.flush()
    finally:
        if close:
            fh.close()
    _emit_manifest(args, "sweep", t0, {"csv": args.output or "-"})
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gqsa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gqsa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, thread_list=False):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        if thread_list:
            p.add_argument("--threads", type=_int_list, default=None,
                           help="comma-separated worker counts (default: $GQSA_THREADS or 4)")
        else:
            p.add_argument("--threads", type=int, default=_default_threads(),
                           help="worker count (default: $GQSA_THREADS or 1)")
        p.add_argument("--manifest", help="append the run manifest (JSON line) here instead of stderr")
        return p

    p = add("compress", cmd_compress, "compress a synthetic (or .npz dense) model to .gqs")
    _add_model_flags(p)
    _add_compress_flags(p)
    p.add_argument("--dense", help="dense model .npz with weight_<i>/bias_<i> arrays")
    p.add_argument("-o", "--output", required=True)

    p = add("tune", cmd_tune, "run BQPO and/or E2E-OQP on a .gqs file")
    _add_model_flags(p)
    _add_tune_flags(p)
    p.add_argument("--stage", choices=("bqpo", "e2e", "both"), default="both")
    p.add_argument("--sparsity", type=float, help="if given, must match the input file")
    p.add_argument("--bits", type=int, choices=(2, 3, 4, 8), help="if given, must match the input file")
    p.add_argument("--group-size", type=int, help="if given, must match the input file")
    p.add_argument("--dense", help="dense model .npz the file was compressed from")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--loss-csv", help="per-step loss CSV (default: <output>.loss.csv)")

    p = add("verify", cmd_verify, "check a .gqs file against the dense oracles")
    p.add_argument("input")

    p = add("bench", cmd_bench, "time the sparse GEMV engine", thread_list=True)
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=4096)
    p.add_argument("--bits", type=int, default=4, choices=(2, 3, 4, 8))
    p.add_argument("--group-size", type=int, default=16)
    p.add_argument("--sparsity", dest="sparsities", type=_float_list, default=list(DEFAULT_BENCH_SPARSITIES),
                   help="comma-separated sparsity levels")
    p.add_argument("--strategy", type=lambda s: s.split(","), default=["slicek", "streamk"],
                   help="comma-separated subset of reference,slicek,streamk")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="CSV path (default: stdout)")

    p = add("inspect", cmd_inspect, "summarize the layers of a .gqs file")
    p.add_argument("input")

    p = add("footprint", cmd_footprint, "storage accounting for a file or a layer shape")
    p.add_argument("input", nargs="?")
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=4096)
    p.add_argument("--sparsity", type=float, default=0.5)
    p.add_argument("--bits", type=int, default=4, choices=(2, 3, 4, 8))
    p.add_argument("--group-size", type=int, default=16)
    p.add_argument("--bias", action="store_true")

    p = add("sweep", cmd_sweep, "MSE across group sizes or sparsity levels")
    _add_model_flags(p, rows=128, cols=128)
    _add_compress_flags(p)
    _add_tune_flags(p)
    p.add_argument("--axis", choices=("group-size", "sparsity"), default="sparsity")
    p.add_argument("--values", type=_float_list, help="comma-separated axis values")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tune", action="store_true", help="also run BQPO + E2E-OQP")
    p.add_argument("-o", "--output", help="CSV path (default: stdout)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "bench" and args.threads is None:
        env = os.environ.get("GQSA_THREADS")
        args.threads = _int_list(env) if env else [4]
    if args.command == "sweep" and args.values and args.axis == "group-size":
        args.values = [int(v) for v in args.values]
    try:
        return args.func(args)
    except (UsageError, ShapeError) as exc:
        parser.error(str(exc))
    except FormatError as exc:
        print(f"gqsa: {args.input}: {exc}", file=sys.stderr)
        return EXIT_VERIFY if args.command == "verify" else EXIT_IO
    except OSError as exc:
        print(f"gqsa: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
