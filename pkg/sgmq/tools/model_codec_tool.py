"""
Model Codec Tool

Little-endian binary containers sharing one layer-record layout:

- SGMQ (exported fixed-point model): per weighted layer the bit width N,
  exponent f and one signed byte per mantissa; biases as float32.
- SGMC (training checkpoint): a JSON metadata block, then float64 weights
  and biases.

Both end with a CRC32 of every preceding byte.

Layer record:
    u8 kind | u16 name length | name (UTF-8) | u8 rank | u32 dims[rank]
    | payload | u32 bias count | biases

Dims of conv layers are [F, C, kh, kw, stride, padding]; linear layers
[out, in]; maxpool [window, stride]; relu / flatten have rank 0.
"""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from sgmq.errors import CodecError
from sgmq.tools.fixed_point_tool import MAX_ABS_EXPONENT, MAX_BITS, MIN_BITS
from sgmq.tools.nn_engine_tool import Layer, Network

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[MODEL_CODEC] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

SGMQ_MAGIC = b"SGMQ"
SGMC_MAGIC = b"SGMC"
FORMAT_VERSION = 1

KIND_TAGS = {"linear": 1, "conv2d": 2, "maxpool": 3, "relu": 4, "flatten": 5}
TAG_KINDS = {tag: kind for kind, tag in KIND_TAGS.items()}


@dataclass
class QuantizedLayer:
    """
    One layer of an exported model. `mantissas` has the weight shape and
    dtype int8; structural layers carry neither mantissas nor biases.
    """
    kind: str
    name: str
    dims: Tuple[int, ...] = ()
    bits: int = 0
    exponent: int = 0
    mantissas: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    @property
    def is_weighted(self) -> bool:
        return self.kind in ("linear", "conv2d")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "conv2d":
            return tuple(self.dims[:4])
        if self.kind == "linear":
            return tuple(self.dims[:2])
        return ()

    @property
    def stride(self) -> int:
        if self.kind == "conv2d":
            return self.dims[4]
        if self.kind == "maxpool":
            return self.dims[1]
        return 1

    @property
    def padding(self) -> int:
        return self.dims[5] if self.kind == "conv2d" else 0

    @property
    def window(self) -> int:
        return self.dims[0] if self.kind == "maxpool" else 0


@dataclass
class QuantizedModel:
    layers: List[QuantizedLayer] = field(default_factory=list)

    def weighted_layers(self) -> List[QuantizedLayer]:
        return [layer for layer in self.layers if layer.is_weighted]


# ------------------ LAYER DIMS ------------------
def layer_dims(layer: Layer) -> Tuple[int, ...]:
    if layer.kind == "conv2d":
        return tuple(layer.weight.shape) + (layer.stride, layer.padding)
    if layer.kind == "linear":
        return tuple(layer.weight.shape)
    if layer.kind == "maxpool":
        return (layer.window, layer.stride)
    return ()


def _expected_rank(kind: str) -> int:
    return {"conv2d": 6, "linear": 2, "maxpool": 2}.get(kind, 0)


# ------------------ BYTE HELPERS ------------------
class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def pack(self, fmt: str, *values) -> None:
        self.parts.append(struct.pack("<" + fmt, *values))

    def raw(self, data: bytes) -> None:
        self.parts.append(data)

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CodecError(f"{self.source}: truncated payload at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).astype(dtype)


def _check_container(data: bytes, magic: bytes, source: str) -> _Reader:
    if len(data) < len(magic) + 2 + 4:
        raise CodecError(f"{source}: truncated payload ({len(data)} bytes)")
    if data[:4] != magic:
        raise CodecError(f"{source}: bad magic {data[:4]!r}, expected {magic!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    reader = _Reader(body, source)
    reader.take(4)
    version = reader.unpack("H")
    if version != FORMAT_VERSION:
        raise CodecError(f"{source}: version mismatch (file {version}, supported {FORMAT_VERSION})")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CodecError(f"{source}: CRC32 mismatch, file is corrupted or truncated")
    return reader


def _write_header(w: _Writer, kind: str, name: str, dims: Tuple[int, ...]) -> None:
    encoded = name.encode("utf-8")
    w.pack("B", KIND_TAGS[kind])
    w.pack("H", len(encoded))
    w.raw(encoded)
    w.pack("B", len(dims))
    if dims:
        w.pack(f"{len(dims)}I", *dims)


def _read_header(r: _Reader) -> Tuple[str, str, Tuple[int, ...]]:
    tag = r.unpack("B")
    if tag not in TAG_KINDS:
        raise CodecError(f"{r.source}: unknown layer kind tag {tag}")
    kind = TAG_KINDS[tag]
    raw_name = r.take(r.unpack("H"))
    try:
        name = raw_name.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CodecError(f"{r.source}: layer name {raw_name!r} is not valid UTF-8") from exc
    rank = r.unpack("B")
    dims = tuple(int(d) for d in r.array("uint32", rank))
    if rank != _expected_rank(kind):
        raise CodecError(f"{r.source}: layer '{name}' of kind {kind} has rank {rank}")
    return kind, name, dims


# ------------------ SGMQ ------------------
def sgmq_bytes(model: QuantizedModel) -> bytes:
    w = _Writer()
    w.raw(SGMQ_MAGIC)
    w.pack("H", FORMAT_VERSION)
    w.pack("H", len(model.layers))
    for layer in model.layers:
        _write_header(w, layer.kind, layer.name, tuple(layer.dims))
        w.pack("B", layer.bits)
        w.pack("h", layer.exponent)
        if layer.is_weighted:
            w.raw(np.ascontiguousarray(layer.mantissas, dtype=np.int8).tobytes())
            w.pack("I", layer.bias.size)
            w.raw(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
        else:
            w.pack("I", 0)
    return w.finish()


def parse_sgmq(data: bytes, source: str = "<bytes>") -> QuantizedModel:
    r = _check_container(data, SGMQ_MAGIC, source)
    count = r.unpack("H")
    layers = []
    for _ in range(count):
        kind, name, dims = _read_header(r)
        bits = r.unpack("B")
        exponent = r.unpack("h")
        layer = QuantizedLayer(kind=kind, name=name, dims=dims, bits=bits, exponent=exponent)
        if layer.is_weighted:
            if not MIN_BITS <= bits <= MAX_BITS:
                raise CodecError(f"{source}: layer '{name}' declares unsupported bit width {bits}")
            if abs(exponent) > MAX_ABS_EXPONENT:
                raise CodecError(
                    f"{source}: layer '{name}' exponent {exponent} outside [-{MAX_ABS_EXPONENT}, {MAX_ABS_EXPONENT}]"
                )
            shape = layer.weight_shape
            mantissas = r.array("int8", int(np.prod(shape))).reshape(shape)
            bound = 2 ** (bits - 1) - 1
            if mantissas.size and np.abs(mantissas.astype(np.int16)).max() > bound:
                bad = int(mantissas.ravel()[np.argmax(np.abs(mantissas.astype(np.int16)).ravel())])
                raise CodecError(
                    f"{source}: layer '{name}' mantissa {bad} out of range +/-{bound} for N={bits}"
                )
            layer.mantissas = mantissas
            n_bias = r.unpack("I")
            if n_bias != shape[0]:
                raise CodecError(f"{source}: layer '{name}' has {n_bias} biases for {shape[0]} outputs")
            layer.bias = r.array("float32", n_bias)
        else:
            if r.unpack("I") != 0:
                raise CodecError(f"{source}: structural layer '{name}' carries biases")
        layers.append(layer)
    if r.offset != len(r.data):
        raise CodecError(f"{source}: {len(r.data) - r.offset} unexpected trailing bytes")
    return QuantizedModel(layers=layers)


def write_sgmq(model: QuantizedModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(sgmq_bytes(model))
    logger.info(f"Wrote SGMQ model with {len(model.layers)} layer(s) to {path}")
    return path


def read_sgmq(path) -> QuantizedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"SGMQ file not found: {path}")
    return parse_sgmq(path.read_bytes(), str(path))


# ------------------ SGMC CHECKPOINT ------------------
def checkpoint_bytes(network: Network, meta: Dict[str, Any]) -> bytes:
    w = _Writer()
    w.raw(SGMC_MAGIC)
    w.pack("H", FORMAT_VERSION)
    blob = json.dumps(dict(meta, dtype=network.dtype), sort_keys=True).encode("utf-8")
    w.pack("I", len(blob))
    w.raw(blob)
    w.pack("H", len(network.layers))
    for layer in network.layers:
        _write_header(w, layer.kind, layer.name, layer_dims(layer))
        if layer.is_weighted:
            w.raw(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            w.pack("I", layer.bias.size)
            w.raw(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
        else:
            w.pack("I", 0)
    return w.finish()


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> Tuple[Network, Dict[str, Any]]:
    r = _check_container(data, SGMC_MAGIC, source)
    try:
        meta = json.loads(r.take(r.unpack("I")).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError(f"{source}: unreadable metadata block ({exc})") from exc
    dtype = meta.get("dtype", "float64")
    layers = []
    for _ in range(r.unpack("H")):
        kind, name, dims = _read_header(r)
        layer = Layer(kind=kind, name=name)
        if kind in ("linear", "conv2d"):
            shape = dims[:4] if kind == "conv2d" else dims
            layer.weight = r.array("float64", int(np.prod(shape))).reshape(shape).astype(dtype)
            n_bias = r.unpack("I")
            if n_bias != shape[0]:
                raise CodecError(f"{source}: layer '{name}' has {n_bias} biases for {shape[0]} outputs")
            layer.bias = r.array("float64", n_bias).astype(dtype)
            if kind == "conv2d":
                layer.stride, layer.padding = dims[4], dims[5]
        else:
            if kind == "maxpool":
                layer.window, layer.stride = dims
            if r.unpack("I") != 0:
                raise CodecError(f"{source}: structural layer '{name}' carries biases")
        layers.append(layer)
    if r.offset != len(r.data):
        raise CodecError(f"{source}: {len(r.data) - r.offset} unexpected trailing bytes")
    return Network(layers=layers, dtype=dtype), meta


def write_checkpoint(network: Network, meta: Dict[str, Any], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(network, meta))
    logger.info(f"Checkpoint written to {path}")
    return path


def read_checkpoint(path) -> Tuple[Network, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes(), str(path))
