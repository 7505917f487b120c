"""
Command line: train, quantize, eval, export, inspect.

Exit codes: 0 success, 2 usage error, 3 data error, 4 divergence,
5 verification failure.
"""

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from sgmq.errors import (
    CodecError,
    ConfigError,
    DataFormatError,
    DivergenceError,
    QuantizationError,
    ShapeError,
    VerificationError,
)
from sgmq.stages.checkpoints import load_checkpoint, save_checkpoint
from sgmq.stages.evaluation import evaluate
from sgmq.stages.orchestrator import TrainingOrchestrator
from sgmq.stages.quantize_stage import QuantizeStage
from sgmq.stages.types import CheckpointRecord, TrainConfig
from sgmq.tools.fixed_point_tool import step_size
from sgmq.tools.idx_data_tool import load_mnist, with_pixel_mean
from sgmq.tools.integer_infer_tool import export, import_model, model_specs, quantized_to_network, verify_equivalence
from sgmq.tools.run_io_tool import make_run_dir
from sgmq.tools.sgm_regularizer_tool import LambdaSchedule
from sgmq.tools.telemetry_tool import mode_collapse_fraction, mode_counts, snapshot_modes

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_VERIFICATION = 5

DATA_DIR_ENV = "SGM_DATA_DIR"
DEFAULT_VERIFY_SAMPLES = 1000

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[CLI] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)


# ------------------ FLAG PARSING ------------------
def parse_range(text: str, cast=float) -> Tuple:
    """'start:end' -> (start, end)."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigError(f"expected start:end, got '{text}'")
    try:
        return cast(parts[0]), cast(parts[1])
    except ValueError as exc:
        raise ConfigError(f"cannot parse range '{text}': {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgmq", description="Multimodal fixed-point weight training")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    parser.add_argument("--data-dir", default=os.environ.get(DATA_DIR_ENV, "data"))
    parser.add_argument("--runs-dir", default="runs")
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="float pretraining + SGM fine-tuning + hard quantization")
    train.add_argument("--arch", default="lenet5", choices=["lenet5", "mlp"])
    train.add_argument("--bits", type=int, default=2)
    train.add_argument("--epochs", type=int, default=80)
    train.add_argument("--batch", type=int, default=64)
    train.add_argument("--lr", default="0.01:0.001")
    train.add_argument("--lambda", dest="lam", default="0:1000")
    train.add_argument("--f-range", default="-8:8")
    train.add_argument("--init", default="fresh", help="'fresh' or a float checkpoint path")
    train.add_argument("--baseline-epochs", type=int, default=10)
    train.add_argument("--baseline-lr", default="0.05:0.005")
    train.add_argument("--limit", type=int, default=None)
    train.add_argument("--validation-split", action="store_true")
    train.add_argument("--dtype", default="float64", choices=["float64", "float32"])
    train.add_argument("--no-layer-scale", action="store_true", help="use lambda instead of lambda/M per layer")
    train.add_argument("--hist-every", type=int, default=10)
    train.add_argument("--resume", default=None, help="resume from a sgm_last.sgmc checkpoint")

    quantize = sub.add_parser("quantize", help="hard-quantize a checkpoint")
    quantize.add_argument("checkpoint")
    quantize.add_argument("--bits", type=int, default=2)
    quantize.add_argument("--f-range", default="-8:8")
    quantize.add_argument("--out", default=None)
    quantize.add_argument("--limit", type=int, default=None)

    evaluate_cmd = sub.add_parser("eval", help="test error of a .sgmc or .sgmq model")
    evaluate_cmd.add_argument("model")
    evaluate_cmd.add_argument("--limit", type=int, default=None)

    export_cmd = sub.add_parser("export", help="write SGMQ and verify integer inference")
    export_cmd.add_argument("checkpoint")
    export_cmd.add_argument("--out", default=None)
    export_cmd.add_argument("--verify-samples", type=int, default=DEFAULT_VERIFY_SAMPLES)

    inspect = sub.add_parser("inspect", help="per-layer N, f and mode histogram")
    inspect.add_argument("model")
    return parser


def config_from_flags(args: argparse.Namespace) -> TrainConfig:
    lr_start, lr_end = parse_range(args.lr)
    lam_start, lam_end = parse_range(args.lam)
    base_start, base_end = parse_range(args.baseline_lr)
    f_range = parse_range(args.f_range, cast=int)
    if args.epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {args.epochs}")
    return TrainConfig(
        bits=args.bits,
        epochs=args.epochs,
        batch_size=args.batch,
        lr_start=lr_start,
        lr_end=lr_end,
        lambda_schedule=LambdaSchedule(lam_start, lam_end, args.epochs),
        seed=args.seed,
        f_range=f_range,
        init=args.init,
        arch=args.arch,
        baseline_epochs=args.baseline_epochs,
        baseline_lr_start=base_start,
        baseline_lr_end=base_end,
        limit=args.limit,
        validation_split=args.validation_split,
        dtype=args.dtype,
        scale_by_count=not args.no_layer_scale,
        hist_every=args.hist_every,
    ).validate()


def _load_model(path: str):
    """(kind, model, specs, pixel_mean) for a .sgmq or .sgmc file."""
    if Path(path).suffix == ".sgmq":
        model = import_model(path)
        return "sgmq", model, model_specs(model), None
    record = load_checkpoint(path)
    return "sgmc", record.network, record.specs, record.pixel_mean


def _load_test_split(args, pixel_mean, limit):
    _, test = load_mnist(args.data_dir, limit=limit)
    (test,) = with_pixel_mean(pixel_mean, test)
    return test


# ------------------ COMMANDS ------------------
def cmd_train(args) -> int:
    config = config_from_flags(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.config is not None:
        config = resume.config
    train, test = load_mnist(args.data_dir, validation_split=config.validation_split, limit=config.limit)
    if resume is not None:
        train, test = with_pixel_mean(resume.pixel_mean, train, test)
    run_dir = Path(args.resume).parent if resume is not None else make_run_dir(args.runs_dir, config.seed)

    outcome = TrainingOrchestrator(config, run_dir).run(train, test, resume=resume)
    print(f"run directory: {run_dir}")
    print(f"soft test error: {outcome.soft.test_error:.4%}")
    print(f"hard test error: {outcome.quantized.error_after:.4%}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    f_range = parse_range(args.f_range, cast=int)
    record = load_checkpoint(args.checkpoint)
    test = _load_test_split(args, record.pixel_mean, args.limit)

    result = QuantizeStage(bits=args.bits, f_range=f_range).run(record.network, record.specs, test)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("quantized.sgmc")
    save_checkpoint(
        CheckpointRecord(
            epoch=record.epoch,
            network=result.network,
            specs=result.specs,
            lam=record.lam,
            eta=record.eta,
            train_loss=record.train_loss,
            test_error=result.error_after,
            phase="quantized",
            config=record.config,
            telemetry=record.telemetry,
            pixel_mean=record.pixel_mean,
        ),
        out,
    )
    print(f"error before: {result.error_before:.4%}")
    print(f"error after:  {result.error_after:.4%}")
    print(f"delta:        {result.error_delta * 100:+.2f} pp")
    print(f"written:      {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, model, _, pixel_mean = _load_model(args.model)
    test = _load_test_split(args, pixel_mean, args.limit)
    print(f"test error: {evaluate(model, test):.4%} ({len(test)} samples)")
    return EXIT_OK


def cmd_export(args) -> int:
    record = load_checkpoint(args.checkpoint)
    if not record.specs:
        raise ConfigError(f"{args.checkpoint} carries no quantizer specs; run quantize first")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".sgmq")
    reference = record.network.astype("float64")
    export(reference, record.specs, out)

    model = import_model(out)
    test = _load_test_split(args, record.pixel_mean, args.verify_samples)
    report = verify_equivalence(model, reference, test.inputs())
    print(f"exported:       {out}")
    print(f"max |dlogit|:   {report.max_abs_deviation:.3g}")
    print(f"agreement:      {report.agreement:.4%} over {report.samples} samples")
    report.raise_if_failed()
    return EXIT_OK


def cmd_inspect(args) -> int:
    kind, model, specs, _ = _load_model(args.model)
    network = quantized_to_network(model) if kind == "sgmq" else model
    if not specs:
        print("no quantizer specs attached (float checkpoint)")
        for layer in network.regularized_layers():
            print(f"{layer.name}: {layer.weight.size} weights, |w|max={np.abs(layer.weight).max():.4g}")
        return EXIT_OK
    snapshot = snapshot_modes(network, specs, epoch=0)
    collapse = mode_collapse_fraction(network, specs)
    for layer, spec, frac in zip(network.regularized_layers(), specs, collapse):
        counts = mode_counts(snapshot, layer.layer_id)
        modes = " ".join(f"{k:+d}:{c}" for k, c in counts.items())
        print(
            f"{layer.name}: N={spec.bits} f={spec.exponent} step={step_size(spec):g} "
            f"M={layer.weight.size} within-step/10={frac:.2%} modes[{modes}]"
        )
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "quantize": cmd_quantize,
    "eval": cmd_eval,
    "export": cmd_export,
    "inspect": cmd_inspect,
}


def _set_quiet() -> None:
    for name, candidate in logging.root.manager.loggerDict.items():
        if name.startswith("sgmq") and isinstance(candidate, logging.Logger):
            candidate.setLevel(logging.WARNING)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.quiet:
        _set_quiet()

    limits = threadpool_limits(limits=1) if args.deterministic else contextlib.nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](args)
    except (ConfigError, QuantizationError, ShapeError) as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    except (DataFormatError, CodecError, FileNotFoundError) as exc:
        logger.error(str(exc))
        return EXIT_DATA
    except DivergenceError as exc:
        logger.error(str(exc))
        return EXIT_DIVERGENCE
    except VerificationError as exc:
        logger.error(str(exc))
        return EXIT_VERIFICATION


if __name__ == "__main__":
    sys.exit(main())
