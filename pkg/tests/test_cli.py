import dataclasses
import re
import struct
import zlib

import numpy as np
import pytest

from sgmq import cli
from sgmq.errors import DivergenceError
from sgmq.stages.checkpoints import load_checkpoint, save_checkpoint
from sgmq.tools.idx_data_tool import load_mnist
from sgmq.tools.integer_infer_tool import EquivalenceReport
from sgmq.tools.model_codec_tool import QuantizedLayer, QuantizedModel, write_sgmq


def _run(mnist_dir, runs_dir, *args):
    return cli.main(["--data-dir", str(mnist_dir), "--runs-dir", str(runs_dir), "--quiet", *args])


def _smoke_train(mnist_dir, runs_dir):
    code = _run(
        mnist_dir, runs_dir,
        "train", "--arch", "mlp", "--epochs", "1", "--limit", "32", "--batch", "16", "--baseline-epochs", "1",
    )
    assert code == cli.EXIT_OK
    (run_dir,) = list(runs_dir.iterdir())
    return run_dir


@pytest.fixture
def trained_run(mnist_dir, tmp_path):
    return _smoke_train(mnist_dir, tmp_path / "runs")


def test_parse_range():
    assert cli.parse_range("0.01:0.001") == (0.01, 0.001)
    assert cli.parse_range("-8:8", cast=int) == (-8, 8)


@pytest.mark.parametrize(
    "flags",
    [
        ["--bits", "1"],
        ["--lr", "0.01"],
        ["--lambda", "a:b"],
        ["--epochs", "0"],
        ["--lr", "0.001:0.01"],
    ],
)
def test_invalid_train_flags_are_usage_errors(mnist_dir, tmp_path, flags):
    assert _run(mnist_dir, tmp_path / "runs", "train", "--arch", "mlp", *flags) == cli.EXIT_USAGE
    assert not (tmp_path / "runs").exists()


def test_missing_data_is_a_data_error(tmp_path):
    assert _run(tmp_path / "empty", tmp_path / "runs", "train", "--arch", "mlp", "--epochs", "1") == cli.EXIT_DATA


def test_train_smoke_writes_artifacts(trained_run):
    for name in ("metrics.csv", "baseline_metrics.csv", "switches.csv", "metrics_summary.json", "quantized.sgmc"):
        assert (trained_run / name).exists(), name
    assert re.fullmatch(r"\d{8}T\d{6}Z-0", trained_run.name)


def test_export_then_eval_agree(mnist_dir, tmp_path, trained_run, capsys):
    out = tmp_path / "model.sgmq"
    assert _run(mnist_dir, tmp_path, "export", str(trained_run / "quantized.sgmc"), "--out", str(out)) == cli.EXIT_OK
    assert "agreement:      100.0000%" in capsys.readouterr().out

    _run(mnist_dir, tmp_path, "eval", str(out))
    from_sgmq = capsys.readouterr().out
    _run(mnist_dir, tmp_path, "eval", str(trained_run / "quantized.sgmc"))
    assert capsys.readouterr().out == from_sgmq


def test_inspect_reports_three_modes(mnist_dir, tmp_path, trained_run, capsys):
    assert _run(mnist_dir, tmp_path, "inspect", str(trained_run / "quantized.sgmc")) == cli.EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    assert all("N=2" in line and "modes[-1:" in line and "+1:" in line for line in lines)


def test_quantize_float_checkpoint_is_idempotent(mnist_dir, tmp_path, trained_run):
    first, second = tmp_path / "q1.sgmc", tmp_path / "q2.sgmc"
    assert _run(mnist_dir, tmp_path, "quantize", str(trained_run / "baseline.sgmc"), "--out", str(first)) == 0
    assert _run(mnist_dir, tmp_path, "quantize", str(first), "--out", str(second)) == 0
    assert first.read_bytes() == second.read_bytes()


def test_export_refusals(mnist_dir, tmp_path, trained_run):
    # float checkpoint: no quantizer specs attached
    assert _run(mnist_dir, tmp_path, "export", str(trained_run / "baseline.sgmc")) == cli.EXIT_USAGE
    # soft checkpoint: weights are off-grid
    assert _run(mnist_dir, tmp_path, "export", str(trained_run / "sgm_final.sgmc")) == cli.EXIT_USAGE


def test_corrupt_checkpoint_is_a_data_error(mnist_dir, tmp_path, trained_run):
    corrupt = tmp_path / "corrupt.sgmc"
    data = bytearray((trained_run / "quantized.sgmc").read_bytes())
    data[20] ^= 0xFF
    corrupt.write_bytes(bytes(data))
    assert _run(mnist_dir, tmp_path, "eval", str(corrupt)) == cli.EXIT_DATA


def _one_layer_model(name="fc", exponent=2):
    return QuantizedModel(
        layers=[
            QuantizedLayer(kind="flatten", name="flatten"),
            QuantizedLayer(
                kind="linear", name=name, dims=(10, 784), bits=2, exponent=exponent,
                mantissas=np.zeros((10, 784), dtype=np.int8), bias=np.zeros(10, dtype=np.float32),
            ),
        ]
    )


def test_out_of_range_exponent_in_model_is_a_data_error(mnist_dir, tmp_path):
    path = write_sgmq(_one_layer_model(exponent=100), tmp_path / "bad.sgmq")
    assert _run(mnist_dir, tmp_path, "inspect", str(path)) == cli.EXIT_DATA
    assert _run(mnist_dir, tmp_path, "eval", str(path)) == cli.EXIT_DATA


def test_non_utf8_layer_name_is_a_data_error(mnist_dir, tmp_path):
    good = write_sgmq(_one_layer_model(name="zq"), tmp_path / "good.sgmq").read_bytes()
    body = good[:-4].replace(b"zq", b"\xff\xfe", 1)
    bad = tmp_path / "bad.sgmq"
    bad.write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    assert _run(mnist_dir, tmp_path, "eval", str(bad)) == cli.EXIT_DATA


def test_checkpoints_store_full_training_mean(mnist_dir, trained_run):
    # the smoke run trains on 32 of 40 samples
    full_train, _ = load_mnist(mnist_dir)
    for name in ("baseline.sgmc", "sgm_last.sgmc", "sgm_final.sgmc", "quantized.sgmc"):
        assert load_checkpoint(trained_run / name).pixel_mean == full_train.pixel_mean, name


def test_eval_feeds_the_stored_mean(mnist_dir, tmp_path, trained_run, monkeypatch):
    record = load_checkpoint(trained_run / "quantized.sgmc")
    shifted = save_checkpoint(dataclasses.replace(record, pixel_mean=0.25), tmp_path / "shifted.sgmc")
    seen = []

    def fake_evaluate(network, dataset):
        seen.append((dataset.pixel_mean, len(dataset)))
        return 0.0

    monkeypatch.setattr(cli, "evaluate", fake_evaluate)
    assert _run(mnist_dir, tmp_path, "eval", str(shifted), "--limit", "4") == cli.EXIT_OK
    assert _run(mnist_dir, tmp_path, "eval", str(trained_run / "quantized.sgmc")) == cli.EXIT_OK
    assert seen == [(0.25, 4), (record.pixel_mean, 20)]


def test_divergence_exit_code(mnist_dir, tmp_path, monkeypatch):
    def diverge(self, train, test, resume=None):
        raise DivergenceError("loss exploded")

    monkeypatch.setattr(cli.TrainingOrchestrator, "run", diverge)
    assert _run(mnist_dir, tmp_path / "runs", "train", "--arch", "mlp", "--epochs", "1") == cli.EXIT_DIVERGENCE


def test_failed_verification_exit_code(mnist_dir, tmp_path, trained_run, monkeypatch):
    failing = EquivalenceReport(samples=20, max_abs_deviation=0.5, agreement=0.9, decoded_max_abs_deviation=0.0)
    monkeypatch.setattr(cli, "verify_equivalence", lambda *args, **kwargs: failing)
    code = _run(mnist_dir, tmp_path, "export", str(trained_run / "quantized.sgmc"), "--out", str(tmp_path / "m.sgmq"))
    assert code == cli.EXIT_VERIFICATION


def test_resume_from_last_checkpoint(mnist_dir, tmp_path, trained_run):
    code = _run(mnist_dir, tmp_path, "--deterministic", "train", "--resume", str(trained_run / "sgm_last.sgmc"))
    assert code == cli.EXIT_OK
