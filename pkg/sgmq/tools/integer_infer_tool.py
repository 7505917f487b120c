"""
Integer Inference Tool

- Export of hard-quantized networks to SGMQ (refuses off-grid weights)
- Integer-mantissa forward pass: every weighted layer accumulates
  mantissa x activation products, then shifts the result once by 2^(-f)
- Equivalence check against the float network
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from sgmq.errors import QuantizationError, ShapeError, VerificationError
from sgmq.tools.fixed_point_tool import QuantizerSpec, decode_tensor, encode_tensor
from sgmq.tools.model_codec_tool import (
    QuantizedLayer,
    QuantizedModel,
    layer_dims,
    read_sgmq,
    write_sgmq,
)
from sgmq.tools.nn_engine_tool import (
    Layer,
    Network,
    conv2d_accumulate,
    forward,
    linear_accumulate,
    maxpool_forward,
    relu,
    to_nchw,
)

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[INT_INFER] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)


@dataclass
class EquivalenceReport:
    samples: int
    max_abs_deviation: float
    agreement: float
    decoded_max_abs_deviation: float

    @property
    def passed(self) -> bool:
        return (
            self.max_abs_deviation == 0.0
            and self.decoded_max_abs_deviation == 0.0
            and self.agreement == 1.0
        )

    def raise_if_failed(self) -> None:
        if not self.passed:
            raise VerificationError(
                f"integer inference deviates from the float reference: "
                f"max |dlogit|={self.max_abs_deviation:.3g}, agreement={self.agreement:.4%}"
            )


# ------------------ EXPORT / IMPORT ------------------
def quantize_network_for_export(network: Network, specs: Sequence[QuantizerSpec]) -> QuantizedModel:
    weighted = network.regularized_layers()
    if len(weighted) != len(specs):
        raise ShapeError(f"{len(specs)} quantizer specs for {len(weighted)} weighted layers")
    spec_iter = iter(specs)
    layers = []
    for layer in network.layers:
        q = QuantizedLayer(kind=layer.kind, name=layer.name, dims=layer_dims(layer))
        if layer.is_weighted:
            spec = next(spec_iter)
            try:
                q.mantissas = encode_tensor(layer.weight, spec)
            except QuantizationError as exc:
                raise QuantizationError(
                    f"layer '{layer.name}': {exc}; run hard_quantize before export"
                ) from exc
            q.bits, q.exponent = spec.bits, spec.exponent
            q.bias = layer.bias.astype(np.float32)
        layers.append(q)
    return QuantizedModel(layers=layers)


def export(network: Network, specs: Sequence[QuantizerSpec], path) -> QuantizedModel:
    """Encode a hard-quantized network and write it as SGMQ."""
    model = quantize_network_for_export(network, specs)
    write_sgmq(model, path)
    return model


def import_model(path) -> QuantizedModel:
    model = read_sgmq(path)
    logger.info(f"Imported SGMQ model from {Path(path)}: {len(model.weighted_layers())} weighted layer(s)")
    return model


def model_specs(model: QuantizedModel):
    return [QuantizerSpec(bits=l.bits, exponent=l.exponent) for l in model.weighted_layers()]


def quantized_to_network(model: QuantizedModel) -> Network:
    """Float network over the decoded weights (biases widened from float32)."""
    layers = []
    for q in model.layers:
        layer = Layer(kind=q.kind, name=q.name, stride=q.stride, padding=q.padding, window=q.window)
        if q.is_weighted:
            layer.weight = decode_tensor(q.mantissas, QuantizerSpec(bits=q.bits, exponent=q.exponent))
            layer.bias = q.bias.astype(np.float64)
        layers.append(layer)
    return Network(layers=layers)


def with_storage_biases(network: Network) -> Network:
    """Copy of `network` whose biases are rounded to SGMQ's float32 storage."""
    net = network.astype("float64")
    for layer in net.regularized_layers():
        layer.bias = layer.bias.astype(np.float32).astype(np.float64)
    return net


# ------------------ INTEGER FORWARD ------------------
def integer_forward(model: QuantizedModel, x: np.ndarray) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    for q in model.layers:
        if q.kind == "conv2d":
            m = q.mantissas.astype(np.float64)
            acc, _, (oh, ow) = conv2d_accumulate(h, m.reshape(m.shape[0], -1), m.shape, q.stride, q.padding)
            h = to_nchw(np.ldexp(acc, -q.exponent) + q.bias.astype(np.float64), h.shape[0], oh, ow)
        elif q.kind == "linear":
            m = q.mantissas.astype(np.float64)
            if h.ndim != 2 or h.shape[1] != m.shape[1]:
                raise ShapeError(f"layer '{q.name}' expects {m.shape[1]} inputs, got {h.shape}")
            h = np.ldexp(linear_accumulate(h, m), -q.exponent) + q.bias.astype(np.float64)
        elif q.kind == "relu":
            h = relu(h)
        elif q.kind == "maxpool":
            h, _ = maxpool_forward(h, q.window, q.stride)
        else:
            h = h.reshape(h.shape[0], -1)
    return h


def integer_predict(model: QuantizedModel, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    chunks = [integer_forward(model, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks, axis=0)


def verify_equivalence(model: QuantizedModel, reference: Network, inputs: np.ndarray, batch_size: int = 500) -> EquivalenceReport:
    """
    Compare integer inference with the float reference (biases at storage
    precision) and with the float pass over the decoded weights.
    """
    decoded = quantized_to_network(model)
    if not decoded.same_architecture(reference):
        raise ShapeError("exported model and reference network have different architectures")
    reference = with_storage_biases(reference)

    max_dev, decoded_dev, agree = 0.0, 0.0, 0
    for i in range(0, len(inputs), batch_size):
        x = inputs[i:i + batch_size]
        logits_int = integer_forward(model, x)
        logits_ref, _ = forward(reference, x)
        logits_dec, _ = forward(decoded, x)
        max_dev = max(max_dev, float(np.max(np.abs(logits_int - logits_ref))))
        decoded_dev = max(decoded_dev, float(np.max(np.abs(logits_int - logits_dec))))
        agree += int(np.sum(logits_int.argmax(axis=1) == logits_ref.argmax(axis=1)))

    report = EquivalenceReport(
        samples=len(inputs),
        max_abs_deviation=max_dev,
        agreement=agree / len(inputs) if len(inputs) else 1.0,
        decoded_max_abs_deviation=decoded_dev,
    )
    logger.info(
        f"Equivalence over {report.samples} sample(s): max |dlogit|={report.max_abs_deviation:.3g}, "
        f"agreement={report.agreement:.4%}"
    )
    return report
