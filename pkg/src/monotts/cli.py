"""Command-line entry point: ``monotts <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, InputError, MonoTTSError

log = logging.getLogger("monotts")

THREADS_ENV = "FEATHER_THREADS"
EXIT_USAGE = 2
EXIT_IO = 4
EXIT_NUMERIC = 5

EXIT_HELP = """\
exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, bad flag value)
  3  invariant violation (config, schedule, shapes, inputs)
  4  file I/O or bundle format error
  5  numeric failure (NaN/Inf, divergence)

Failures print one line to stderr: "error: <ErrorClass>: <message>".
Environment: FEATHER_THREADS caps internal thread pools (default 1).
"""


class UsageError(Exception):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=34)


# --- override parsing -----------------------------------------------------------

def _coerce(text: str, default):
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_overrides(items: list[str] | None, cls) -> dict:
    """Turn ``["key=value", ...]`` into typed keyword arguments for dataclass ``cls``."""
    base = cls()
    known = {f.name for f in fields(cls)}
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in known:
            raise ConfigError(f"bad {cls.__name__} override {item!r}; fields: {', '.join(sorted(known))}")
        try:
            out[key] = _coerce(value.strip(), getattr(base, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {cls.__name__}.{key}: {exc}") from None
    return out


def parse_block(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"block shape must look like 16x1, got {text!r}") from None
    return rows, cols


def parse_ids(text: str) -> np.ndarray:
    try:
        ids = np.array([int(v) for v in text.replace(",", " ").split()], dtype=np.int64)
    except ValueError:
        raise InputError(f"symbol ids must be integers, got {text!r}") from None
    if ids.size == 0:
        raise InputError("empty symbol sequence")
    return ids


# --- helpers -------------------------------------------------------------------------

def configure_threads() -> int:
    """Apply FEATHER_THREADS to the BLAS pools; returns the cap.

    The compiled kernels are serial, so numba's pool is never started.
    """
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)
    return n


def _report_dir(path) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_matrix_csv(path: Path, rows: np.ndarray, header: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.asarray(rows, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM, values scaled by the image maximum."""
    a = np.asarray(image, dtype=np.float64)
    peak = a.max() if a.size and a.max() > 0 else 1.0
    pixels = np.clip(np.round(255 * a / peak), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())


def _dump_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _load_model(path):
    from .model.bundle import load_bundle

    return load_bundle(path)


def _precision_of(model):
    return tc.precision(model.config.precision)


# --- subcommands ---------------------------------------------------------------

def _task_spec(args):
    from .bench.data import ToyTaskSpec

    explicit = {k: getattr(args, k) for k in ("count", "seed") if getattr(args, k, None) is not None}
    return ToyTaskSpec(**{**parse_overrides(args.task, ToyTaskSpec), **explicit})


def cmd_gen_data(args) -> int:
    from .bench.data import generate_toy_dataset

    spec = _task_spec(args)
    ds = generate_toy_dataset(spec)
    ds.save(args.out)
    print(f"wrote {len(ds)} utterances to {args.out}")
    return 0


def _prune_schedule(args):
    from .sparsity import PruneSchedule

    rows, cols = parse_block(args.block)
    values = dict(
        start_step=args.prune_start, interval=args.prune_interval, end_step=args.prune_end,
        target_sparsity=args.target_sparsity, block_rows=rows, block_cols=cols, curve=args.curve,
    )
    if args.prune_scale < 1:
        raise ConfigError(f"--prune-scale must be >= 1, got {args.prune_scale}")
    for key in ("start_step", "interval", "end_step"):
        values[key] //= args.prune_scale
    values["interval"] = max(1, values["interval"])
    values.update(parse_overrides(args.schedule, PruneSchedule))
    return PruneSchedule(**values)


def cmd_train_toy(args) -> int:
    from .bench.data import ToyDataset, generate_toy_dataset
    from .model import ModelConfig, TrainConfig, train_toy
    from .model.bundle import save_bundle
    from .model.seq2seq import PRUNABLE
    from .model.train import loss_for_batch, sparsify_from_pruner

    model_values = dict(
        mechanism=args.mechanism, stop_lambda=args.stop_lambda, delay_frames=args.delay,
        reduction_factor=args.reduction, precision=args.precision, seed=args.seed,
    )
    if args.data:
        dataset = ToyDataset.load(args.data)
    else:
        dataset = generate_toy_dataset(_task_spec(args))
    model_values.update(mel_dim=dataset.spec.mel_dim, vocab_size=dataset.spec.vocab_size)
    model_values.update(parse_overrides(args.model, ModelConfig))
    config = ModelConfig(**model_values)
    layers = tuple(args.prune_layers.split(",")) if args.prune_layers else PRUNABLE
    train = TrainConfig(
        steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr, min_lr_fraction=args.min_lr_fraction,
        momentum=args.momentum, clip_norm=args.clip_norm, seed=args.seed, log_every=args.log_every,
        prune=_prune_schedule(args) if args.prune else None, prune_layers=layers,
    )
    with tc.precision(config.precision):
        result = train_toy(dataset, config, train)
        model = result.model
        if result.pruner is not None:
            sparsify_from_pruner(model, result.pruner)
        extra = {"train": {k: v for k, v in vars(train).items() if k != "prune"},
                 "task": dataset.spec.to_dict()}
        if train.prune is not None:
            extra["prune_schedule"] = vars(train.prune)
        extra["train"]["prune_layers"] = list(layers)
        save_bundle(model, args.out, extra=extra)
        report = _report_dir(args.report)
        if report is not None:
            from .model.train import write_metrics_csv
            from .plotting import plot_alignment, plot_loss_curve

            write_metrics_csv(result.metrics, report / "metrics.csv")
            plot_loss_curve(result.metrics, report / "loss_curve.png")
            u = dataset[0]
            _, out = loss_for_batch(model, u.ids[None], u.mel[None])
            _write_matrix_csv(report / "alignment.csv", out.alignments[0], [f"j{j}" for j in range(1, u.J + 1)])
            plot_alignment(out.alignments[0], report / "alignment.png", out.positions[0], "teacher-forced alignment")
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {train.steps} steps; final loss {last.get('total_loss', float('nan')):.5f}; bundle {args.out}")
    return 0


def cmd_infer(args) -> int:
    model = _load_model(args.bundle)
    if (args.ids is None) == (args.ids_file is None):
        raise UsageError("give exactly one of --ids or --ids-file")
    text = args.ids if args.ids is not None else Path(args.ids_file).read_text()
    ids = parse_ids(text)
    with _precision_of(model):
        trace = model.infer(ids, max_steps=args.max_steps)
    out = _report_dir(args.out)
    M = model.config.mel_dim
    mel_header = [f"m{i}" for i in range(M)]
    _write_matrix_csv(out / "mel_pre.csv", trace.y_pre, mel_header)
    _write_matrix_csv(out / "mel_post.csv", trace.refined(), mel_header)
    _write_matrix_csv(out / "alignment.csv", trace.alignments, [f"j{j}" for j in range(1, trace.J + 1)])
    write_pgm(out / "alignment.pgm", trace.alignments.T[::-1])
    from .plotting import plot_alignment

    plot_alignment(trace.alignments, out / "alignment.png", trace.mu, "inference alignment")
    meta = {
        "J": trace.J,
        "steps": trace.steps,
        "frames": int(trace.y_pre.shape[0]),
        "stop_step": trace.stop_step,
        "truncated": trace.truncated,
        "final_position": float(trace.mu[-1]),
        "stop_error": abs(float(trace.mu[-1]) - (trace.J + 1)),
        "mechanism": model.config.mechanism,
        "ids": ids.tolist(),
    }
    _dump_json(out / "meta.json", meta)
    print(f"steps={trace.steps} stop_step={trace.stop_step} truncated={str(trace.truncated).lower()}")
    return 0


def cmd_prune(args) -> int:
    from .model.bundle import read_manifest, save_bundle
    from .model.seq2seq import PRUNABLE

    model = _load_model(args.bundle)
    if model.sparse:
        model.densify()
    layers = tuple(args.layers.split(",")) if args.layers else PRUNABLE
    block = parse_block(args.block)
    model.prune(args.sparsity, block, layers)
    extra = dict(read_manifest(args.bundle).get("extra") or {})
    extra["offline_prune"] = {"sparsity": args.sparsity, "block_shape": list(block), "layers": list(layers)}
    save_bundle(model, args.out, extra=extra)
    achieved = {k: round(v.kernel.sparsity, 6) for k, v in model.sparse.items()}
    print(f"wrote sparse bundle {args.out}; sparsity {achieved}")
    return 0


def cmd_eval_robust(args) -> int:
    from .bench.data import STRESS_KINDS, ToyTaskSpec, stress_suite
    from .bench.robustness import robustness_eval, write_detail_csv, write_summary_csv
    from .model.bundle import read_manifest

    models = [_load_model(b) for b in args.bundle]
    reports = []
    for path, model in zip(args.bundle, models):
        task = (read_manifest(path).get("extra") or {}).get("task")
        spec = ToyTaskSpec.from_dict(task) if task else ToyTaskSpec(vocab_size=model.config.vocab_size,
                                                                    mel_dim=model.config.mel_dim)
        spec = spec.replace(**parse_overrides(args.task, ToyTaskSpec))
        kinds = args.suites.split(",") if args.suites else list(STRESS_KINDS)
        suites = [stress_suite(kind, spec, count=args.count, seed=args.seed) for kind in kinds]
        with _precision_of(model):
            reports.append(robustness_eval(model, suites, spec, seed=args.seed))
    labels = [r.mechanism for r in reports]
    for r, path in zip(reports, args.bundle):
        if labels.count(r.mechanism) > 1:
            r.mechanism = f"{r.mechanism}:{Path(path).name}"
    out = _report_dir(args.report)
    write_summary_csv(reports, out / "robustness.csv")
    write_detail_csv(reports, out / "robustness_detail.csv")
    from .plotting import plot_robustness

    plot_robustness([r.summary_row() for r in reports], out / "robustness.png")
    for r in reports:
        row = r.summary_row()
        print(f"{row['mechanism']}: non_termination={row['non_termination']:.3f} "
              f"coverage={row['coverage_error']:.3f} repetition={row['repetition']:.3f} "
              f"aggregate={row['aggregate']:.3f} ({row['inputs']} inputs)")
    return 0


def _parse_sparsities(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--sparsity must be a comma-separated list of numbers, got {text!r}") from None


def cmd_bench(args) -> int:
    from .bench.benchmark import bench_decoder, bench_models, write_report_csv
    from .model import ModelConfig

    overrides = parse_overrides(args.model, ModelConfig)
    reports = []
    if args.dense or args.sparse:
        if not (args.dense and args.sparse):
            raise UsageError("--dense and --sparse must be given together")
        pairs = [(_load_model(args.dense), _load_model(args.sparse))]
    else:
        pairs = [bench_models(args.hidden, s, parse_block(args.block), **overrides)
                 for s in _parse_sparsities(args.sparsity)]
    for dense, sparse in pairs:
        rep = bench_decoder(dense, sparse, frames=args.frames, warmup=args.warmup, repeats=args.repeats, J=args.J)
        rep.threads = int(os.environ.get(THREADS_ENV, "1"))
        reports.append(rep)
        print(rep.pretty())
    out = _report_dir(args.report)
    if out is not None:
        from .plotting import plot_benchmark

        write_report_csv(reports, out / "bench.csv")
        plot_benchmark(reports, out / "bench.png")
    return 0


def cmd_count_ops(args) -> int:
    from .sparsity import count_ops

    print(f"{count_ops(args.input, args.hidden, args.sparsity):.1f}")
    return 0


# --- parser ----------------------------------------------------------------------

def _add_task_flags(p, with_seed=True):
    p.add_argument("--task", action="append", metavar="KEY=VALUE",
                   help="toy task field override, repeatable (e.g. j_max=30)")
    p.add_argument("--count", type=int, default=None, help="number of utterances (task default if unset)")
    if with_seed:
        p.add_argument("--seed", type=int, default=0, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="monotts", description="Toy monotonic-attention TTS: train, infer, prune, evaluate, bench.",
                     epilog=EXIT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_text, fn):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EXIT_HELP, formatter_class=_formatter)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", "generate a synthetic toy dataset", cmd_gen_data)
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_task_flags(p)

    p = add("train-toy", "train a model on the toy task and write a bundle", cmd_train_toy)
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--data", help="dataset directory from gen-data (generated in memory if unset)")
    p.add_argument("--report", help="directory for metrics.csv and PNG figures")
    p.add_argument("--mechanism", choices=("gaussian", "gmmv2b"), default="gaussian", help="attention mechanism")
    p.add_argument("--lambda", dest="stop_lambda", type=float, default=0.001, help="stop-loss weight")
    p.add_argument("--delay", type=int, default=5, help="target delay in frames")
    p.add_argument("--reduction", type=int, default=2, help="frames emitted per decoder step")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32", help="floating-point precision")
    p.add_argument("--model", action="append", metavar="KEY=VALUE", help="model config override, repeatable")
    p.add_argument("--steps", type=int, default=3000, help="training steps")
    p.add_argument("--batch-size", type=int, default=16, help="utterances per batch")
    p.add_argument("--lr", type=float, default=0.1, help="peak learning rate")
    p.add_argument("--min-lr-fraction", type=float, default=0.05, help="final learning rate as a fraction of --lr")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--clip-norm", type=float, default=1.0, help="global gradient-norm clip")
    p.add_argument("--log-every", type=int, default=10, help="metric logging interval in steps")
    p.add_argument("--prune", action="store_true", help="enable gradual block pruning of the decoder LSTMs")
    p.add_argument("--prune-start", type=int, default=20_000, help="first pruning step")
    p.add_argument("--prune-interval", type=int, default=500, help="steps between mask updates")
    p.add_argument("--prune-end", type=int, default=200_000, help="step at which the target sparsity is reached")
    p.add_argument("--target-sparsity", type=float, default=0.9, help="final sparsity")
    p.add_argument("--block", default="16x1", help="block shape ROWSxCOLS")
    p.add_argument("--curve", choices=("cubic", "linear"), default="cubic", help="sparsity ramp shape")
    p.add_argument("--prune-scale", type=int, default=1, help="divide the three schedule step counts by this")
    p.add_argument("--prune-layers", default="", help="comma-separated layers to prune (all decoder LSTMs if empty)")
    p.add_argument("--schedule", action="append", metavar="KEY=VALUE", help="prune schedule override, repeatable")
    _add_task_flags(p)

    p = add("infer", "synthesize one symbol sequence from a bundle", cmd_infer)
    p.add_argument("--bundle", required=True, help="model bundle directory")
    p.add_argument("--ids", help="symbol ids, comma or space separated")
    p.add_argument("--ids-file", help="file holding symbol ids")
    p.add_argument("--max-steps", type=int, default=None, help="decoder step budget (model default if unset)")
    p.add_argument("--out", required=True, help="output directory for frames, alignment and meta.json")

    p = add("prune", "convert a dense bundle to a block-sparse bundle", cmd_prune)
    p.add_argument("--bundle", required=True, help="input bundle directory")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--sparsity", type=float, default=0.9, help="fraction of blocks removed")
    p.add_argument("--block", default="16x1", help="block shape ROWSxCOLS")
    p.add_argument("--layers", default="", help="comma-separated layers (all decoder LSTMs if empty)")

    p = add("eval-robust", "stress-test alignment robustness of one or more bundles", cmd_eval_robust)
    p.add_argument("--bundle", required=True, action="append", help="bundle directory, repeatable")
    p.add_argument("--report", required=True, help="output directory for CSV and PNG")
    p.add_argument("--suites", default="", help="comma-separated stress suites (all if empty)")
    p.add_argument("--count", type=int, default=6, help="inputs per suite")
    p.add_argument("--seed", type=int, default=0, help="random seed for stress inputs")
    p.add_argument("--task", action="append", metavar="KEY=VALUE", help="toy task field override, repeatable")

    p = add("bench", "time sparse versus dense decoding", cmd_bench)
    p.add_argument("--hidden", type=int, default=256, help="decoder LSTM width for random models")
    p.add_argument("--sparsity", default="0.9", help="comma-separated sparsities for random models")
    p.add_argument("--block", default="16x1", help="block shape ROWSxCOLS")
    p.add_argument("--model", action="append", metavar="KEY=VALUE", help="model config override, repeatable")
    p.add_argument("--dense", help="dense bundle (instead of random models)")
    p.add_argument("--sparse", help="sparse bundle paired with --dense")
    p.add_argument("--frames", type=int, default=200, help="frames decoded per timed run")
    p.add_argument("--warmup", type=int, default=2, help="untimed warm-up runs")
    p.add_argument("--repeats", type=int, default=5, help="timed runs (median reported)")
    p.add_argument("--J", type=int, default=20, help="input length")
    p.add_argument("--report", help="directory for bench.csv and bench.png")

    p = add("count-ops", "print the multiply count of one LSTM step", cmd_count_ops)
    p.add_argument("--input", type=int, default=256, help="input width I")
    p.add_argument("--hidden", type=int, default=256, help="hidden width H")
    p.add_argument("--sparsity", type=float, default=0.9, help="sparsity S")
    return parser


def _fail(exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error: {exc.__class__.__name__}: {msg}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        configure_threads()
        return args.func(args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    except MonoTTSError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    except FloatingPointError as exc:
        return _fail(exc, EXIT_NUMERIC)
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
