import logging
from pathlib import Path
from typing import Optional

import numpy as np

from sgmq.errors import ConfigError
from sgmq.stages.checkpoints import save_checkpoint
from sgmq.stages.epoch_runner import DivergenceGuard, EpochRunner
from sgmq.stages.evaluation import evaluate
from sgmq.stages.types import CheckpointRecord, TrainConfig
from sgmq.tools.idx_data_tool import Dataset
from sgmq.tools.metrics_logger_tool import log_epoch_metrics
from sgmq.tools.nn_engine_tool import Network, build_lenet5, build_mlp
from sgmq.tools.sgm_regularizer_tool import linear_ramp

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[BASELINE] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

BASELINE_METRICS = "baseline_metrics.csv"
BASELINE_CHECKPOINT = "baseline.sgmc"
MLP_SIZES = (28 * 28, 300, 100, 10)


def build_network(config: TrainConfig) -> Network:
    """Fresh network for `config.arch`, fan-in uniform init seeded by config.seed."""
    rng = np.random.default_rng(config.seed)
    if config.arch == "mlp":
        return build_mlp(MLP_SIZES, rng, dtype=config.dtype)
    return build_lenet5(rng, dtype=config.dtype)


class BaselineTrainer:
    """
    BaselineTrainer

    Responsibilities:
    - Train a float network with plain SGD and a linear lr ramp.
    - Refuse configurations with a non-zero lambda schedule.
    - Produce the CheckpointRecord used to initialize SGM fine-tuning.

    Interface:
    - run(config, train, test, init_network=None, run_dir=None, epochs=None) -> CheckpointRecord
    """

    def run(
        self,
        config: TrainConfig,
        train: Dataset,
        test: Dataset,
        init_network: Optional[Network] = None,
        run_dir: Optional[Path] = None,
        epochs: Optional[int] = None,
    ) -> CheckpointRecord:
        config.validate()
        if not config.lambda_schedule.is_zero:
            raise ConfigError("float baseline training requires a zero lambda schedule")

        network = init_network.astype(config.dtype) if init_network is not None else build_network(config)
        n_epochs = config.epochs if epochs is None else epochs
        if n_epochs == 0:
            logger.info("Zero baseline epochs requested; returning the initialization")
            return CheckpointRecord(
                epoch=-1, network=network, config=config, test_error=evaluate(network, test), pixel_mean=train.pixel_mean
            )

        runner = EpochRunner(config, train, test)
        guard = DivergenceGuard()
        record = None
        for epoch in range(n_epochs):
            eta = linear_ramp(config.lr_start, config.lr_end, epoch, n_epochs)
            train_loss, test_error = runner.run_epoch(network, epoch, eta, 0.0)
            guard.update(train_loss, epoch)
            if run_dir is not None:
                log_epoch_metrics(
                    run_dir,
                    {"epoch": epoch, "eta": eta, "lambda": 0.0, "train_loss": train_loss, "test_error": test_error},
                    layer_names=[],
                    filename=BASELINE_METRICS,
                )
            record = CheckpointRecord(
                epoch=epoch,
                network=network,
                eta=eta,
                train_loss=train_loss,
                test_error=test_error,
                phase="baseline",
                config=config,
                initial_loss=guard.initial_loss,
                divergence_strikes=guard.strikes,
                pixel_mean=train.pixel_mean,
            )

        logger.info(f"Float baseline finished after {n_epochs} epoch(s): test error {record.test_error:.4%}")
        if run_dir is not None:
            save_checkpoint(record, Path(run_dir) / BASELINE_CHECKPOINT)
        return record


def train_float_baseline(config: TrainConfig, train: Dataset, test: Dataset, **kwargs) -> CheckpointRecord:
    return BaselineTrainer().run(config, train, test, **kwargs)
