import struct
import zlib

import numpy as np
import pytest

from sgmq.errors import CodecError
from sgmq.tools.model_codec_tool import (
    QuantizedLayer,
    QuantizedModel,
    checkpoint_bytes,
    parse_checkpoint,
    parse_sgmq,
    read_checkpoint,
    read_sgmq,
    sgmq_bytes,
    write_checkpoint,
    write_sgmq,
)
from sgmq.tools.nn_engine_tool import build_lenet5


def _linear_model(mantissas, bits=2, exponent=2, name="fc"):
    mantissas = np.atleast_2d(np.asarray(mantissas, dtype=np.int8))
    return QuantizedModel(
        layers=[
            QuantizedLayer(kind="flatten", name="flatten"),
            QuantizedLayer(
                kind="linear",
                name=name,
                dims=mantissas.shape,
                bits=bits,
                exponent=exponent,
                mantissas=mantissas,
                bias=np.linspace(-1, 1, mantissas.shape[0]).astype(np.float32),
            ),
        ]
    )


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_sgmq_round_trip_is_byte_identical(tmp_path):
    model = _linear_model([[1, 0, -1], [0, 1, 1]])
    path = write_sgmq(model, tmp_path / "m.sgmq")
    loaded = read_sgmq(path)
    np.testing.assert_array_equal(loaded.layers[1].mantissas, model.layers[1].mantissas)
    np.testing.assert_array_equal(loaded.layers[1].bias, model.layers[1].bias)
    assert (loaded.layers[1].bits, loaded.layers[1].exponent) == (2, 2)
    assert sgmq_bytes(loaded) == path.read_bytes()


def test_mantissa_payload_is_one_byte_per_weight():
    small = sgmq_bytes(_linear_model(np.zeros((2, 3))))
    large = sgmq_bytes(_linear_model(np.zeros((2, 8))))
    assert len(large) - len(small) == 2 * 5


def test_layer_dims_carry_conv_and_pool_hyperparameters():
    model = QuantizedModel(
        layers=[
            QuantizedLayer(
                kind="conv2d", name="conv", dims=(2, 1, 3, 3, 2, 1), bits=3, exponent=-1,
                mantissas=np.ones((2, 1, 3, 3), dtype=np.int8), bias=np.zeros(2, dtype=np.float32),
            ),
            QuantizedLayer(kind="maxpool", name="pool", dims=(2, 2)),
            QuantizedLayer(kind="relu", name="relu"),
        ]
    )
    loaded = parse_sgmq(sgmq_bytes(model))
    conv, pool, _ = loaded.layers
    assert (conv.stride, conv.padding, conv.weight_shape, conv.exponent) == (2, 1, (2, 1, 3, 3), -1)
    assert (pool.window, pool.stride) == (2, 2)
    assert pool.mantissas is None and pool.bits == 0


def test_bad_magic():
    data = bytearray(sgmq_bytes(_linear_model([[1]])))
    data[0:4] = b"XXXX"
    with pytest.raises(CodecError, match="bad magic"):
        parse_sgmq(bytes(data))


def test_crc_detects_corruption():
    data = bytearray(sgmq_bytes(_linear_model([[1, 0]])))
    data[-6] ^= 0xFF
    with pytest.raises(CodecError, match="CRC32"):
        parse_sgmq(bytes(data))


def test_version_mismatch():
    body = bytearray(sgmq_bytes(_linear_model([[1]]))[:-4])
    body[4:6] = struct.pack("<H", 2)
    with pytest.raises(CodecError, match="version"):
        parse_sgmq(_reseal(bytes(body)))


def test_truncated_payload():
    with pytest.raises(CodecError):
        parse_sgmq(b"SGMQ")
    body = sgmq_bytes(_linear_model([[1, 0, 1]]))[:-4]
    with pytest.raises(CodecError, match="truncated"):
        parse_sgmq(_reseal(body[:-3]))


def test_mantissa_out_of_range_for_bits():
    data = sgmq_bytes(_linear_model([[4, 0]], bits=2))
    with pytest.raises(CodecError, match="mantissa 4 out of range"):
        parse_sgmq(data)


def test_non_utf8_layer_name_is_a_codec_error():
    body = sgmq_bytes(_linear_model([[1, 0]], name="zq"))[:-4]
    with pytest.raises(CodecError, match="not valid UTF-8"):
        parse_sgmq(_reseal(body.replace(b"zq", b"\xff\xfe", 1)))


@pytest.mark.parametrize("exponent", [61, -61, 100])
def test_exponent_outside_supported_range_is_rejected_on_load(exponent):
    data = sgmq_bytes(_linear_model([[1, 0]], exponent=exponent))
    with pytest.raises(CodecError, match=f"exponent {exponent} outside"):
        parse_sgmq(data)
    assert parse_sgmq(sgmq_bytes(_linear_model([[1, 0]], exponent=60))).layers[1].exponent == 60


def test_checkpoint_round_trip(tmp_path):
    net = build_lenet5(np.random.default_rng(0))
    meta = {"epoch": 3, "phase": "sgm", "specs": [[2, 5], [2, 6], [2, 7], [2, 4]]}
    path = write_checkpoint(net, meta, tmp_path / "c.sgmc")
    loaded, loaded_meta = read_checkpoint(path)
    assert loaded.same_architecture(net)
    for a, b in zip(loaded.regularized_layers(), net.regularized_layers()):
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
    assert loaded_meta["epoch"] == 3 and loaded_meta["specs"][1] == [2, 6]
    assert checkpoint_bytes(loaded, meta) == path.read_bytes()


def test_checkpoint_keeps_float32_dtype():
    net = build_lenet5(np.random.default_rng(0), dtype="float32")
    loaded, _ = parse_checkpoint(checkpoint_bytes(net, {}))
    assert loaded.dtype == "float32"
    assert loaded.layers[0].weight.dtype == np.float32


def test_checkpoint_rejects_sgmq_bytes():
    with pytest.raises(CodecError, match="bad magic"):
        parse_checkpoint(sgmq_bytes(_linear_model([[1]])))
