"""
NN Engine Tool

Small deterministic NumPy engine for LeNet-class networks:
linear, conv2d (im2col), maxpool, relu, flatten, softmax cross-entropy,
reverse-mode backward and plain SGD.

Forward passes never touch their inputs; everything backward needs is
returned in a list of ForwardRecord objects.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sgmq.errors import DataFormatError, DivergenceError, ShapeError

WEIGHTED_KINDS = ("linear", "conv2d")
LAYER_KINDS = ("linear", "conv2d", "maxpool", "relu", "flatten")
SUPPORTED_DTYPES = ("float64", "float32")


@dataclass
class Layer:
    """
    One layer descriptor. Weighted layers carry `weight` (+ `bias`) and a
    1-based `layer_id`; structural layers only carry hyperparameters.
    """
    kind: str
    name: str
    weight: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    window: int = 0
    layer_id: Optional[int] = None

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS


@dataclass
class Network:
    layers: List[Layer]
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in SUPPORTED_DTYPES:
            raise ShapeError(f"unsupported dtype {self.dtype}; expected one of {SUPPORTED_DTYPES}")
        next_id = 1
        names = set()
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise ShapeError(f"unknown layer kind '{layer.kind}'")
            if layer.name in names:
                raise ShapeError(f"duplicate layer name '{layer.name}'")
            names.add(layer.name)
            if layer.is_weighted:
                if layer.weight is None or layer.bias is None:
                    raise ShapeError(f"layer '{layer.name}' needs weight and bias")
                if layer.layer_id is not None and layer.layer_id != next_id:
                    raise ShapeError(
                        f"layer '{layer.name}' has layer_id={layer.layer_id}, expected {next_id}"
                    )
                layer.layer_id = next_id
                next_id += 1

    def regularized_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if layer.is_weighted]

    def weights(self) -> List[np.ndarray]:
        return [layer.weight for layer in self.regularized_layers()]

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.regularized_layers())

    def copy(self) -> "Network":
        layers = [
            Layer(
                kind=l.kind,
                name=l.name,
                weight=None if l.weight is None else l.weight.copy(),
                bias=None if l.bias is None else l.bias.copy(),
                stride=l.stride,
                padding=l.padding,
                window=l.window,
                layer_id=l.layer_id,
            )
            for l in self.layers
        ]
        return Network(layers=layers, dtype=self.dtype)

    def astype(self, dtype: str) -> "Network":
        net = self.copy()
        net.dtype = dtype
        for layer in net.regularized_layers():
            layer.weight = np.ascontiguousarray(layer.weight, dtype=dtype)
            layer.bias = np.ascontiguousarray(layer.bias, dtype=dtype)
        return net

    def same_architecture(self, other: "Network") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if (a.kind, a.stride, a.padding, a.window) != (b.kind, b.stride, b.padding, b.window):
                return False
            if a.is_weighted and (a.weight.shape != b.weight.shape or a.bias.shape != b.bias.shape):
                return False
        return True


@dataclass
class ForwardRecord:
    kind: str
    cache: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ParamGrads:
    weight: np.ndarray
    bias: np.ndarray


# ------------------ INITIALIZATION ------------------
def _fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: str) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear_layer(name: str, n_in: int, n_out: int, rng: np.random.Generator, dtype: str = "float64") -> Layer:
    return Layer(
        kind="linear",
        name=name,
        weight=_fan_in_uniform(rng, (n_out, n_in), n_in, dtype),
        bias=np.zeros(n_out, dtype=dtype),
    )


def conv_layer(
    name: str,
    c_in: int,
    c_out: int,
    kernel: int,
    rng: np.random.Generator,
    stride: int = 1,
    padding: int = 0,
    dtype: str = "float64",
) -> Layer:
    return Layer(
        kind="conv2d",
        name=name,
        weight=_fan_in_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel, dtype),
        bias=np.zeros(c_out, dtype=dtype),
        stride=stride,
        padding=padding,
    )


def build_lenet5(rng: np.random.Generator, dtype: str = "float64") -> Network:
    """
    conv 20x5x5 -> pool 2 -> conv 50x5x5 -> pool 2 -> fc 500 -> fc 10,
    ReLU after every hidden weighted layer; input [B, 1, 28, 28].
    """
    return Network(
        layers=[
            conv_layer("conv1", 1, 20, 5, rng, dtype=dtype),
            Layer(kind="relu", name="relu1"),
            Layer(kind="maxpool", name="pool1", window=2, stride=2),
            conv_layer("conv2", 20, 50, 5, rng, dtype=dtype),
            Layer(kind="relu", name="relu2"),
            Layer(kind="maxpool", name="pool2", window=2, stride=2),
            Layer(kind="flatten", name="flatten"),
            linear_layer("fc1", 50 * 4 * 4, 500, rng, dtype=dtype),
            Layer(kind="relu", name="relu3"),
            linear_layer("fc2", 500, 10, rng, dtype=dtype),
        ],
        dtype=dtype,
    )


def build_mlp(sizes: Sequence[int], rng: np.random.Generator, dtype: str = "float64") -> Network:
    """Flatten + fully connected stack with ReLU between layers."""
    if len(sizes) < 2:
        raise ShapeError(f"an MLP needs at least input and output sizes, got {list(sizes)}")
    layers = [Layer(kind="flatten", name="flatten")]
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        layers.append(linear_layer(f"fc{i}", n_in, n_out, rng, dtype=dtype))
        if i < len(sizes) - 1:
            layers.append(Layer(kind="relu", name=f"relu{i}"))
    return Network(layers=layers, dtype=dtype)


# ------------------ LINEAR ------------------
def linear_accumulate(x: np.ndarray, w_mat: np.ndarray) -> np.ndarray:
    return x @ w_mat.T


def _check_linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> None:
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"linear expects x[B,in], W[out,in], b[out]; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"linear shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_linear(x, W, b)
    return linear_accumulate(x, W) + b


def linear_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray) -> Tuple[np.ndarray, ParamGrads]:
    return dout @ W, ParamGrads(weight=dout.T @ x, bias=dout.sum(axis=0))


# ------------------ CONV2D ------------------
def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, C, H, W = x.shape
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * oh * ow, C * kh * kw)
    return np.ascontiguousarray(cols), (oh, ow)


def _check_conv(x: np.ndarray, kshape: Tuple[int, ...], stride: int, padding: int) -> None:
    if x.ndim != 4 or len(kshape) != 4:
        raise ShapeError(f"conv2d expects x[B,C,H,W] and K[F,C,kh,kw]; got {x.shape}, {kshape}")
    _, C, H, W = x.shape
    F, Ck, kh, kw = kshape
    if C != Ck:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, kernel expects {Ck}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")


def conv2d_accumulate(
    x: np.ndarray,
    k_mat: np.ndarray,
    kshape: Tuple[int, ...],
    stride: int,
    padding: int,
) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int]]:
    """cols @ k_mat.T laid out as [B*oh*ow, F], without bias."""
    _check_conv(x, kshape, stride, padding)
    _, _, kh, kw = kshape
    cols, (oh, ow) = _im2col(x, kh, kw, stride, padding)
    return cols @ k_mat.T, cols, (oh, ow)


def to_nchw(y: np.ndarray, batch: int, oh: int, ow: int) -> np.ndarray:
    F = y.shape[1]
    return np.ascontiguousarray(y.reshape(batch, oh, ow, F).transpose(0, 3, 1, 2))


def _conv2d_forward_cached(x, K, b, stride, padding):
    if b.shape != (K.shape[0],):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match {K.shape[0]} filters")
    y, cols, (oh, ow) = conv2d_accumulate(x, K.reshape(K.shape[0], -1), K.shape, stride, padding)
    y = y + b
    return to_nchw(y, x.shape[0], oh, ow), {"cols": cols, "x_shape": x.shape, "out_hw": (oh, ow)}


def conv2d_forward(x: np.ndarray, K: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    return _conv2d_forward_cached(x, K, b, stride, padding)[0]


def conv2d_backward(dout: np.ndarray, cache: Dict[str, Any], K: np.ndarray, stride: int, padding: int):
    B, C, H, W = cache["x_shape"]
    F, _, kh, kw = K.shape
    oh, ow = cache["out_hw"]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, F)
    grads = ParamGrads(
        weight=(dmat.T @ cache["cols"]).reshape(K.shape),
        bias=dmat.sum(axis=0),
    )
    dcols = (dmat @ K.reshape(F, -1)).reshape(B, oh, ow, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, :, i, j]
    return dxp[:, :, padding:padding + H, padding:padding + W], grads


# ------------------ MAXPOOL / RELU ------------------
def maxpool_forward(x: np.ndarray, window: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-window maxima and the flat in-window argmax (first max in
    row-major order wins).
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects x[B,C,H,W], got {x.shape}")
    if window < 1 or stride < 1 or window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"maxpool window {window} / stride {stride} invalid for input {x.shape}")
    B, C = x.shape[:2]
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, oh, ow, window * window)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), argmax


def maxpool_backward(dout: np.ndarray, argmax: np.ndarray, x_shape, window: int, stride: int) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=dout.dtype)
    oh, ow = argmax.shape[2], argmax.shape[3]
    for idx in range(window * window):
        i, j = divmod(idx, window)
        dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.where(argmax == idx, dout, 0)
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


# ------------------ LOSS ------------------
def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean -log softmax(logits)[label] and its gradient (softmax - onehot) / B.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not match")
    B, K = logits.shape
    if B and (labels.min() < 0 or labels.max() >= K):
        bad = int(labels[(labels < 0) | (labels >= K)][0])
        raise DataFormatError(f"label {bad} outside [0, {K})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    rows = np.arange(B)
    loss = float(-log_probs[rows, labels].mean())
    grad = exp / denom
    grad[rows, labels] -= 1.0
    return loss, grad / B


# ------------------ NETWORK PASSES ------------------
def forward(network: Network, x: np.ndarray) -> Tuple[np.ndarray, List[ForwardRecord]]:
    h = np.asarray(x, dtype=network.dtype)
    records = []
    for layer in network.layers:
        if layer.kind == "conv2d":
            out, cache = _conv2d_forward_cached(h, layer.weight, layer.bias, layer.stride, layer.padding)
        elif layer.kind == "linear":
            out = linear_forward(h, layer.weight, layer.bias)
            cache = {"x": h}
        elif layer.kind == "relu":
            out, cache = relu(h), {"x": h}
        elif layer.kind == "maxpool":
            out, argmax = maxpool_forward(h, layer.window, layer.stride)
            cache = {"argmax": argmax, "x_shape": h.shape}
        else:  # flatten
            out, cache = h.reshape(h.shape[0], -1), {"x_shape": h.shape}
        records.append(ForwardRecord(kind=layer.kind, cache=cache))
        h = out
    return h, records


def backward(network: Network, records: Optional[List[ForwardRecord]], grad_logits: np.ndarray) -> List[Optional[ParamGrads]]:
    """
    Reverse-mode pass. Returns one ParamGrads per layer (None for
    structural layers), aligned with network.layers.
    """
    if records is None or len(records) != len(network.layers):
        raise ShapeError("backward needs the records of a forward pass over this network")
    grads: List[Optional[ParamGrads]] = [None] * len(network.layers)
    d = grad_logits
    for idx in range(len(network.layers) - 1, -1, -1):
        layer, record = network.layers[idx], records[idx]
        if record.kind != layer.kind:
            raise ShapeError(f"record {idx} is a '{record.kind}' record, layer is '{layer.kind}'")
        cache = record.cache
        if layer.kind == "conv2d":
            d, grads[idx] = conv2d_backward(d, cache, layer.weight, layer.stride, layer.padding)
        elif layer.kind == "linear":
            d, grads[idx] = linear_backward(d, cache["x"], layer.weight)
        elif layer.kind == "relu":
            d = d * (cache["x"] > 0)
        elif layer.kind == "maxpool":
            d = maxpool_backward(d, cache["argmax"], cache["x_shape"], layer.window, layer.stride)
        else:
            d = d.reshape(cache["x_shape"])
    return grads


def loss_and_grads(network: Network, x: np.ndarray, labels: np.ndarray):
    """Mean batch loss, per-layer gradients and the logits."""
    logits, records = forward(network, x)
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    return loss, backward(network, records, grad_logits), logits


def predict_logits(network: Network, x: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    chunks = [forward(network, x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
    if not chunks:
        return np.zeros((0, 0), dtype=network.dtype)
    return np.concatenate(chunks, axis=0)


# ------------------ UPDATE ------------------
def sgd_step(
    network: Network,
    task_grads: List[Optional[ParamGrads]],
    reg_grads: Optional[List[np.ndarray]],
    eta: float,
) -> Network:
    """
    w <- w - eta * (dL/dw + dL_R/dw) in place. `reg_grads` is aligned with
    network.regularized_layers(); biases are never regularized.
    """
    if len(task_grads) != len(network.layers):
        raise ShapeError(f"{len(task_grads)} gradient entries for {len(network.layers)} layers")
    weighted = network.regularized_layers()
    if reg_grads is not None and len(reg_grads) != len(weighted):
        raise ShapeError(f"{len(reg_grads)} regularizer gradients for {len(weighted)} weighted layers")

    updates = []
    reg_iter = iter(reg_grads) if reg_grads is not None else None
    for layer, g in zip(network.layers, task_grads):
        if not layer.is_weighted:
            continue
        if g is None:
            raise ShapeError(f"missing gradient for layer '{layer.name}'")
        if g.weight.shape != layer.weight.shape or g.bias.shape != layer.bias.shape:
            raise ShapeError(f"gradient shape mismatch in layer '{layer.name}'")
        g_w = g.weight
        if reg_iter is not None:
            r = next(reg_iter)
            if r.shape != layer.weight.shape:
                raise ShapeError(f"regularizer gradient shape mismatch in layer '{layer.name}'")
            g_w = g_w + r
        if not (np.all(np.isfinite(g_w)) and np.all(np.isfinite(g.bias))):
            raise DivergenceError(f"non-finite gradient in layer '{layer.name}'")
        updates.append((layer, g_w, g.bias))

    for layer, g_w, g_b in updates:
        layer.weight -= (eta * g_w).astype(layer.weight.dtype, copy=False)
        layer.bias -= (eta * g_b).astype(layer.bias.dtype, copy=False)
    return network
