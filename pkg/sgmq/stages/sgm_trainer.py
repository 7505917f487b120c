import logging
from pathlib import Path
from typing import List, Optional

from sgmq.errors import QuantizationError
from sgmq.stages.checkpoints import save_checkpoint
from sgmq.stages.epoch_runner import DivergenceGuard, EpochRunner
from sgmq.stages.types import CheckpointRecord, TrainConfig
from sgmq.tools.fixed_point_tool import QuantizerSpec
from sgmq.tools.idx_data_tool import Dataset
from sgmq.tools.metrics_logger_tool import log_epoch_metrics
from sgmq.tools.nn_engine_tool import Network
from sgmq.tools.run_io_tool import write_csv
from sgmq.tools.sgm_regularizer_tool import (
    lambda_at,
    layer_residuals,
    layer_states,
    linear_ramp,
    search_step_exponent,
)
from sgmq.tools.telemetry_tool import TelemetryRecorder

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[SGM] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

LAST_CHECKPOINT = "sgm_last.sgmc"


def search_specs(network: Network, bits: int, f_range, run_dir: Optional[Path] = None) -> List[QuantizerSpec]:
    """
    One-shot step search on the current weights of every regularized layer.
    The chosen steps stay fixed for the rest of training.
    """
    specs, rows = [], []
    for layer in network.regularized_layers():
        result = search_step_exponent(layer.weight, bits, f_range)
        if result.degenerate:
            raise QuantizationError(f"layer '{layer.name}' is all zero; step search is degenerate")
        specs.append(result.spec)
        rows.extend(
            {"layer": layer.name, "exponent": f, "residual": r, "chosen": int(f == result.spec.exponent)}
            for f, r in sorted(result.residuals.items())
        )
        logger.info(f"Layer '{layer.name}': N={bits}, f={result.spec.exponent} (step 2^{-result.spec.exponent})")
    if run_dir is not None:
        write_csv(rows, run_dir, "search_steps.csv", columns=["layer", "exponent", "residual", "chosen"])
    return specs


class SGMTrainer:
    """
    SGMTrainer

    Responsibilities:
    - Resolve every layer's step 2^(-f) on the initial weights.
    - Fine-tune with the SGM regularizer: per epoch, eta and lambda follow
      their linear ramps and stay constant within the epoch.
    - Log metrics.csv, mode telemetry and a resumable checkpoint per epoch.

    Interface:
    - run(config, init_network, train, test, run_dir=None, resume=None, until_epoch=None)
        -> CheckpointRecord
    """

    def __init__(self):
        self.lambda_history: List[float] = []

    def run(
        self,
        config: TrainConfig,
        init_network: Optional[Network],
        train: Dataset,
        test: Dataset,
        run_dir: Optional[Path] = None,
        resume: Optional[CheckpointRecord] = None,
        until_epoch: Optional[int] = None,
    ) -> CheckpointRecord:
        config.validate()

        if resume is not None:
            network = resume.network.copy()
            specs = list(resume.specs)
            start = resume.epoch + 1
            guard = DivergenceGuard(resume.initial_loss, resume.divergence_strikes)
            record = resume
            logger.info(f"Resuming SGM training at epoch {start}")
        else:
            network = init_network.astype(config.dtype)
            specs = search_specs(network, config.bits, config.f_range, run_dir)
            start = 0
            guard = DivergenceGuard()
            record = CheckpointRecord(
                epoch=-1, network=network, specs=specs, phase="sgm", config=config, pixel_mean=train.pixel_mean
            )

        names = [layer.name for layer in network.regularized_layers()]
        recorder = TelemetryRecorder(
            run_dir,
            names,
            specs,
            hist_every=config.hist_every,
            switch_interval=config.switch_interval,
        )
        if resume is not None and run_dir is not None:
            recorder.load_history(start, network)
        elif resume is None:
            recorder.record(network, 0)

        runner = EpochRunner(config, train, test, specs=specs)
        stop = config.epochs if until_epoch is None else min(until_epoch, config.epochs)
        for epoch in range(start, stop):
            eta = linear_ramp(config.lr_start, config.lr_end, epoch, config.epochs)
            lam = lambda_at(config.lambda_schedule, epoch)
            self.lambda_history.append(lam)

            train_loss, test_error = runner.run_epoch(network, epoch, eta, lam)
            guard.update(train_loss, epoch)

            residuals = layer_residuals(network.weights(), layer_states(network, specs))
            if run_dir is not None:
                row = {"epoch": epoch, "eta": eta, "lambda": lam, "train_loss": train_loss, "test_error": test_error}
                row.update({f"reg_residual_{n}": r for n, r in zip(names, residuals)})
                log_epoch_metrics(run_dir, row, layer_names=names)
            recorder.record(network, epoch + 1, final=epoch == config.epochs - 1)

            record = CheckpointRecord(
                epoch=epoch,
                network=network,
                specs=specs,
                lam=lam,
                eta=eta,
                train_loss=train_loss,
                test_error=test_error,
                phase="sgm",
                config=config,
                telemetry=sorted(p.name for p in Path(run_dir).glob("*.csv")) if run_dir is not None else [],
                initial_loss=guard.initial_loss,
                divergence_strikes=guard.strikes,
                pixel_mean=train.pixel_mean,
            )
            if run_dir is not None:
                save_checkpoint(record, Path(run_dir) / LAST_CHECKPOINT)

        return record


def train_sgm(config: TrainConfig, init_network: Network, train: Dataset, test: Dataset, **kwargs) -> CheckpointRecord:
    return SGMTrainer().run(config, init_network, train, test, **kwargs)
