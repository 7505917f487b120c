"""
SGM Regularizer Tool

Multimodal Gaussian regularizer pulling every weight of layer l towards its
nearest level of Q_N(.; 2^(-f_l)):

    L_R = sum_l sum_i lambda / (2 M_l) * (w_i - Q_N(w_i))^2

plus the linear lambda ramp and the per-layer step exponent search.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from sgmq.errors import ConfigError, QuantizationError, ShapeError
from sgmq.tools.fixed_point_tool import QuantizerSpec, quantize_tensor

DEFAULT_F_RANGE = (-8, 8)


@dataclass(frozen=True)
class LayerQuantState:
    """
    Quantization state of one regularized layer (ids are 1-based).
    """
    layer_id: int
    spec: QuantizerSpec
    weight_count: int

    def __post_init__(self):
        if self.weight_count <= 0:
            raise ShapeError(f"layer {self.layer_id} has no weights to regularize")


@dataclass(frozen=True)
class LambdaSchedule:
    """
    Per-epoch linear ramp of the regularization strength.
    """
    lambda_start: float = 0.0
    lambda_end: float = 1000.0
    total_epochs: int = 80

    def __post_init__(self):
        if self.lambda_start < 0 or self.lambda_end < 0:
            raise ConfigError(
                f"lambda endpoints must be non-negative, got {self.lambda_start}:{self.lambda_end}"
            )
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")

    @property
    def is_zero(self) -> bool:
        return self.lambda_start == 0 and self.lambda_end == 0


@dataclass
class StepSearchResult:
    spec: QuantizerSpec
    residuals: Dict[int, float] = field(default_factory=dict)
    degenerate: bool = False


def linear_ramp(start: float, end: float, epoch: int, total_epochs: int) -> float:
    """
    Value of a linear start -> end ramp at `epoch`; both endpoints are hit
    exactly. A single-epoch ramp sits at `end`.
    """
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if total_epochs == 1:
        return float(end)
    t = epoch / (total_epochs - 1)
    return float((1.0 - t) * start + t * end)


def lambda_at(schedule: LambdaSchedule, epoch: int) -> float:
    return linear_ramp(schedule.lambda_start, schedule.lambda_end, epoch, schedule.total_epochs)


def _check_inputs(weights_by_layer: Sequence[np.ndarray], states: Sequence[LayerQuantState], lam: float) -> None:
    if len(weights_by_layer) != len(states):
        raise ShapeError(
            f"got {len(weights_by_layer)} weight tensors for {len(states)} layer states"
        )
    if lam < 0 or not np.isfinite(lam):
        raise ConfigError(f"lambda must be finite and non-negative, got {lam}")
    for w, state in zip(weights_by_layer, states):
        if np.asarray(w).size != state.weight_count:
            raise ShapeError(
                f"layer {state.layer_id}: {np.asarray(w).size} weights but weight_count={state.weight_count}"
            )


def _residual(w: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return w - quantize_tensor(w, spec)


def reg_loss(
    weights_by_layer: Sequence[np.ndarray],
    states: Sequence[LayerQuantState],
    lam: float,
    scale_by_count: bool = True,
) -> float:
    _check_inputs(weights_by_layer, states, lam)
    total = 0.0
    # fixed layer order keeps the reduction deterministic
    for w, state in zip(weights_by_layer, states):
        r = _residual(w, state.spec)
        denom = 2.0 * state.weight_count if scale_by_count else 2.0
        total += lam / denom * float(np.sum(r * r))
    return total


def reg_grad(
    weights_by_layer: Sequence[np.ndarray],
    states: Sequence[LayerQuantState],
    lam: float,
    scale_by_count: bool = True,
) -> List[np.ndarray]:
    """
    dL_R/dw = lambda / M_l * (w - w_q). The quantizer's own derivative is
    taken as zero everywhere, half-step boundaries included.
    """
    _check_inputs(weights_by_layer, states, lam)
    grads = []
    for w, state in zip(weights_by_layer, states):
        w = np.asarray(w)
        scale = lam / state.weight_count if scale_by_count else lam
        grads.append((scale * _residual(w, state.spec)).astype(w.dtype if w.dtype.kind == "f" else np.float64))
    return grads


def layer_residuals(weights_by_layer: Sequence[np.ndarray], states: Sequence[LayerQuantState]) -> List[float]:
    """Mean |w - w_q| per layer."""
    _check_inputs(weights_by_layer, states, 0.0)
    return [float(np.mean(np.abs(_residual(w, s.spec)))) for w, s in zip(weights_by_layer, states)]


def layer_states(network, specs: Sequence[QuantizerSpec]) -> List[LayerQuantState]:
    """
    Rebuild the per-layer states from the live network so weight counts
    always match the current parameters.
    """
    layers = network.regularized_layers()
    if len(layers) != len(specs):
        raise ShapeError(f"{len(specs)} quantizer specs for {len(layers)} regularized layers")
    return [
        LayerQuantState(layer_id=layer.layer_id, spec=spec, weight_count=int(layer.weight.size))
        for layer, spec in zip(layers, specs)
    ]


def quantization_residual(w: np.ndarray, spec: QuantizerSpec) -> float:
    r = _residual(w, spec)
    return float(np.sum(r * r))


def search_step_exponent(
    layer_weights: np.ndarray,
    bits: int,
    f_range: Tuple[int, int] = DEFAULT_F_RANGE,
) -> StepSearchResult:
    """
    Pick the exponent f in f_range minimizing sum (w - Q_N(w; 2^-f))^2.
    Ties go to the larger f. An all-zero layer is flagged degenerate and
    gets f_max.
    """
    f_min, f_max = int(f_range[0]), int(f_range[1])
    if f_min > f_max:
        raise ConfigError(f"empty exponent range [{f_min}, {f_max}]")
    w = np.asarray(layer_weights, dtype=np.float64)
    if w.size and not np.all(np.isfinite(w)):
        raise QuantizationError("cannot search a step for non-finite weights")

    if w.size == 0 or not np.any(w):
        return StepSearchResult(
            spec=QuantizerSpec(bits=bits, exponent=f_max),
            residuals={f: 0.0 for f in range(f_max, f_min - 1, -1)},
            degenerate=True,
        )

    residuals = {}
    best_f, best = f_max, None
    for f in range(f_max, f_min - 1, -1):
        res = quantization_residual(w, QuantizerSpec(bits=bits, exponent=f))
        residuals[f] = res
        if best is None or res < best:
            best_f, best = f, res
    return StepSearchResult(spec=QuantizerSpec(bits=bits, exponent=best_f), residuals=residuals)
