import logging
from typing import List, Optional, Sequence

from sgmq.errors import ShapeError
from sgmq.stages.evaluation import evaluate
from sgmq.stages.sgm_trainer import search_specs
from sgmq.stages.types import QuantizeResult
from sgmq.tools.fixed_point_tool import QuantizerSpec, quantize_tensor
from sgmq.tools.idx_data_tool import Dataset
from sgmq.tools.nn_engine_tool import Network
from sgmq.tools.sgm_regularizer_tool import DEFAULT_F_RANGE

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[QUANTIZE] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)


def hard_quantize(network: Network, specs: Sequence[QuantizerSpec]) -> Network:
    """Copy of `network` with every regularized weight snapped to its level; biases untouched."""
    layers = network.regularized_layers()
    if len(layers) != len(specs):
        raise ShapeError(f"{len(specs)} quantizer specs for {len(layers)} regularized layers")
    quantized = network.copy()
    for layer, spec in zip(quantized.regularized_layers(), specs):
        layer.weight = quantize_tensor(layer.weight, spec)
    return quantized


class QuantizeStage:
    """
    QuantizeStage

    Responsibilities:
    - Search per-layer steps if the checkpoint carries none.
    - Hard-quantize the weights.
    - Report test error before and after.

    Interface:
    - __init__(bits=2, f_range=(-8, 8))
    - run(network, specs, test) -> QuantizeResult
    """

    def __init__(self, bits: int = 2, f_range=DEFAULT_F_RANGE):
        self.bits = bits
        self.f_range = f_range

    def run(self, network: Network, specs: Optional[List[QuantizerSpec]], test: Dataset) -> QuantizeResult:
        searched = not specs
        if searched:
            logger.info("No quantizer specs attached; searching steps on the current weights")
            specs = search_specs(network, self.bits, self.f_range)

        error_before = evaluate(network, test)
        quantized = hard_quantize(network, specs)
        error_after = evaluate(quantized, test)

        result = QuantizeResult(
            network=quantized,
            specs=list(specs),
            error_before=error_before,
            error_after=error_after,
            searched=searched,
        )
        logger.info(
            f"Hard quantization: error {error_before:.4%} -> {error_after:.4%} "
            f"(delta {result.error_delta * 100:+.2f} pp)"
        )
        return result
