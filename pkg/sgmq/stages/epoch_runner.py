"""
One pass over the training split: forward, task backward, optional
regularizer gradient, combined SGD update, then test-set evaluation.
"""

import logging
import math
from typing import List, Optional, Tuple

from sgmq.errors import DivergenceError
from sgmq.stages.evaluation import evaluate
from sgmq.stages.types import TrainConfig
from sgmq.tools.fixed_point_tool import QuantizerSpec
from sgmq.tools.idx_data_tool import Dataset, batches
from sgmq.tools.nn_engine_tool import Network, loss_and_grads, sgd_step
from sgmq.tools.sgm_regularizer_tool import layer_states, reg_grad

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[TRAINER] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


class DivergenceGuard:
    """
    Aborts when the epoch loss exceeds 10x the first epoch's loss for
    3 consecutive epochs.
    """

    def __init__(self, initial_loss: Optional[float] = None, strikes: int = 0):
        self.initial_loss = initial_loss
        self.strikes = strikes

    def update(self, loss: float, epoch: int) -> None:
        if not math.isfinite(loss):
            raise DivergenceError(f"epoch {epoch}: non-finite training loss {loss}")
        if self.initial_loss is None:
            self.initial_loss = loss
            return
        if loss > DIVERGENCE_FACTOR * self.initial_loss:
            self.strikes += 1
            logger.warning(
                f"epoch {epoch}: loss {loss:.4g} exceeds {DIVERGENCE_FACTOR:g}x initial "
                f"{self.initial_loss:.4g} ({self.strikes}/{DIVERGENCE_PATIENCE})"
            )
            if self.strikes >= DIVERGENCE_PATIENCE:
                raise DivergenceError(
                    f"epoch {epoch}: loss above {DIVERGENCE_FACTOR:g}x its initial value "
                    f"for {DIVERGENCE_PATIENCE} consecutive epochs"
                )
        else:
            self.strikes = 0


class EpochRunner:
    """
    EpochRunner

    Responsibilities:
    - Iterate the (seed, epoch)-shuffled training batches.
    - Apply w <- w - eta * (dL/dw + dL_R/dw) per batch; the regularizer
      term is skipped entirely when no quantizer specs are given.
    - Report the mean task loss and the test error.

    Interface:
    - __init__(config, train, test, specs=None)
    - run_epoch(network, epoch, eta, lam) -> (train_loss, test_error)
    """

    def __init__(
        self,
        config: TrainConfig,
        train: Dataset,
        test: Dataset,
        specs: Optional[List[QuantizerSpec]] = None,
    ):
        self.config = config
        self.train = train
        self.test = test
        self.specs = specs

    def run_epoch(self, network: Network, epoch: int, eta: float, lam: float) -> Tuple[float, float]:
        total, seen = 0.0, 0
        for step, (x, y) in enumerate(batches(self.train, self.config.batch_size, self.config.seed, epoch)):
            loss, grads, _ = loss_and_grads(network, x, y)
            if not math.isfinite(loss):
                raise DivergenceError(f"epoch {epoch}, step {step}: non-finite loss {loss}")
            reg = None
            if self.specs is not None:
                states = layer_states(network, self.specs)
                reg = reg_grad(network.weights(), states, lam, scale_by_count=self.config.scale_by_count)
            sgd_step(network, grads, reg, eta)
            total += loss * len(y)
            seen += len(y)
        return total / seen, evaluate(network, self.test)
