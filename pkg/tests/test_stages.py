import json
import math
from dataclasses import replace

import numpy as np
import pytest

from sgmq.errors import ConfigError, DivergenceError
from sgmq.stages.baseline_trainer import BaselineTrainer, build_network, train_float_baseline
from sgmq.stages.checkpoints import load_checkpoint, save_checkpoint
from sgmq.stages.epoch_runner import DivergenceGuard
from sgmq.stages.evaluation import evaluate, evaluation_report
from sgmq.stages.orchestrator import TrainingOrchestrator
from sgmq.stages.quantize_stage import QuantizeStage, hard_quantize
from sgmq.stages.sgm_trainer import SGMTrainer, search_specs, train_sgm
from sgmq.stages.types import CheckpointRecord, TrainConfig
from sgmq.tools.fixed_point_tool import QuantizerSpec
from sgmq.tools.idx_data_tool import Dataset
from sgmq.tools.nn_engine_tool import Layer, Network
from sgmq.tools.run_io_tool import read_csv
from sgmq.tools.sgm_regularizer_tool import LambdaSchedule

from conftest import linear_network

TERNARY = QuantizerSpec(bits=2, exponent=2)


def _assert_same_parameters(a: Network, b: Network):
    for la, lb in zip(a.regularized_layers(), b.regularized_layers()):
        np.testing.assert_array_equal(la.weight, lb.weight)
        np.testing.assert_array_equal(la.bias, lb.bias)


# ------------------ CONFIG ------------------
def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(bits=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=10).validate()  # default lambda schedule spans 80 epochs
    with pytest.raises(ConfigError):
        TrainConfig(lr_start=0.001, lr_end=0.01).validate()
    with pytest.raises(ConfigError):
        TrainConfig(arch="resnet").validate()
    assert TrainConfig().validate().bits == 2


def test_config_dict_round_trip(mlp_config):
    assert TrainConfig.from_dict(json.loads(json.dumps(mlp_config.to_dict()))) == mlp_config


def test_baseline_config_has_zero_lambda(mlp_config):
    baseline = mlp_config.for_baseline()
    assert baseline.lambda_schedule.is_zero
    assert (baseline.epochs, baseline.lr_start, baseline.lr_end) == (1, 0.05, 0.005)


# ------------------ DIVERGENCE ------------------
def test_divergence_guard():
    guard = DivergenceGuard()
    guard.update(1.0, 0)
    guard.update(11.0, 1)
    guard.update(12.0, 2)
    guard.update(0.5, 3)
    assert guard.strikes == 0
    guard.update(20.0, 4)
    guard.update(20.0, 5)
    with pytest.raises(DivergenceError):
        guard.update(20.0, 6)
    with pytest.raises(DivergenceError):
        DivergenceGuard().update(float("nan"), 0)


# ------------------ BASELINE ------------------
def test_baseline_rejects_nonzero_lambda(mlp_config, tiny_data):
    with pytest.raises(ConfigError):
        BaselineTrainer().run(mlp_config, *tiny_data)


def test_zero_baseline_epochs_return_initialization(mlp_config, tiny_data):
    config = mlp_config.for_baseline()
    init = build_network(config)
    record = train_float_baseline(config, *tiny_data, init_network=init, epochs=0)
    assert record.epoch == -1
    _assert_same_parameters(record.network, init)


def test_baseline_writes_metrics_and_checkpoint(mlp_config, tiny_data, tmp_path):
    config = replace(mlp_config, baseline_epochs=2).for_baseline()
    record = BaselineTrainer().run(config, *tiny_data, run_dir=tmp_path)
    assert record.epoch == 1
    assert read_csv(tmp_path, "baseline_metrics.csv")["eta"].tolist() == [0.05, 0.005]
    _assert_same_parameters(load_checkpoint(tmp_path / "baseline.sgmc").network, record.network)


# ------------------ SGM ------------------
def test_zero_lambda_matches_plain_sgd(mlp_config, tiny_data):
    config = replace(mlp_config, lambda_schedule=LambdaSchedule(0.0, 0.0, mlp_config.epochs))
    init = build_network(config)
    plain = BaselineTrainer().run(config, *tiny_data, init_network=init)
    regularized = train_sgm(config, init, *tiny_data)
    _assert_same_parameters(plain.network, regularized.network)
    assert plain.train_loss == regularized.train_loss


def test_sgm_ramps_and_artifacts(mlp_config, tiny_data, tmp_path):
    trainer = SGMTrainer()
    record = trainer.run(mlp_config, build_network(mlp_config), *tiny_data, run_dir=tmp_path)
    assert trainer.lambda_history == [0.0, 500.0, 1000.0]

    metrics = read_csv(tmp_path, "metrics.csv")
    assert metrics["eta"].iloc[0] == 0.01
    assert metrics["eta"].iloc[-1] == 0.001
    assert list(metrics.columns)[-3:] == ["reg_residual_fc1", "reg_residual_fc2", "reg_residual_fc3"]
    for name in ("switches.csv", "modes_fc1.csv", "hist_fc1_0.csv", "hist_fc3_3.csv", "search_steps.csv"):
        assert (tmp_path / name).exists(), name
    assert len(read_csv(tmp_path, "modes_fc2.csv")) == 4

    checkpoint = load_checkpoint(tmp_path / "sgm_last.sgmc")
    assert checkpoint.epoch == 2 and checkpoint.phase == "sgm"
    assert checkpoint.specs == record.specs
    assert checkpoint.config == mlp_config


def test_resume_reproduces_uninterrupted_run(mlp_config, tiny_data, tmp_path):
    init = build_network(mlp_config)
    full_dir, split_dir = tmp_path / "full", tmp_path / "split"
    full = SGMTrainer().run(mlp_config, init, *tiny_data, run_dir=full_dir)

    SGMTrainer().run(mlp_config, init, *tiny_data, run_dir=split_dir, until_epoch=2)
    partial = load_checkpoint(split_dir / "sgm_last.sgmc")
    assert partial.epoch == 1
    resumed = SGMTrainer().run(mlp_config, None, *tiny_data, run_dir=split_dir, resume=partial)

    _assert_same_parameters(full.network, resumed.network)
    for name in ("metrics.csv", "switches.csv", "modes_fc1.csv", "sgm_last.sgmc"):
        assert (full_dir / name).read_bytes() == (split_dir / name).read_bytes(), name


# ------------------ QUANTIZE / EVALUATE ------------------
def test_hard_quantize_examples():
    net = linear_network([[0.30, -0.05]], bias=[0.123])
    hard = hard_quantize(net, [TERNARY])
    np.testing.assert_array_equal(hard.layers[0].weight, [[0.25, 0.0]])
    assert hard.layers[0].bias[0] == 0.123
    assert net.layers[0].weight[0, 0] == 0.30
    _assert_same_parameters(hard_quantize(hard, [TERNARY]), hard)


def _balanced(images):
    return Dataset(images=images, labels=np.arange(10, dtype=np.int64), split_tag="test")


def test_evaluate_constant_and_perfect_predictors():
    constant = Network(
        layers=[
            Layer(kind="flatten", name="flatten"),
            Layer(kind="linear", name="fc", weight=np.zeros((10, 4)), bias=np.eye(10)[3]),
        ]
    )
    assert evaluate(constant, _balanced(np.zeros((10, 1, 2, 2)))) == pytest.approx(0.9)

    perfect = Network(
        layers=[
            Layer(kind="flatten", name="flatten"),
            Layer(kind="linear", name="fc", weight=np.eye(10), bias=np.zeros(10)),
        ]
    )
    onehot = _balanced(np.eye(10).reshape(10, 1, 1, 10))
    assert evaluate(perfect, onehot) == 0.0
    report = evaluation_report(perfect, onehot)
    assert (report.accuracy, report.f1_macro, report.samples) == (1.0, 1.0, 10)


def test_quantize_stage_searches_and_is_idempotent(mlp_config, tiny_data):
    _, test = tiny_data
    stage = QuantizeStage(bits=2)
    first = stage.run(build_network(mlp_config), None, test)
    assert first.searched and len(first.specs) == 3
    second = stage.run(first.network, first.specs, test)
    assert not second.searched
    assert second.error_delta == 0.0
    _assert_same_parameters(first.network, second.network)


# ------------------ CHECKPOINTS ------------------
def test_checkpoint_record_round_trip(mlp_config, tmp_path):
    record = CheckpointRecord(
        epoch=4,
        network=build_network(mlp_config),
        specs=[TERNARY, QuantizerSpec(2, 5), QuantizerSpec(2, 3)],
        lam=12.5,
        eta=0.004,
        phase="sgm",
        config=mlp_config,
        initial_loss=2.3,
        divergence_strikes=1,
        pixel_mean=0.1307,
    )
    path = save_checkpoint(record, tmp_path / "r.sgmc")
    loaded = load_checkpoint(path)
    assert math.isnan(loaded.train_loss)
    assert (loaded.epoch, loaded.specs, loaded.lam, loaded.eta) == (4, record.specs, 12.5, 0.004)
    assert (loaded.config, loaded.initial_loss, loaded.divergence_strikes) == (mlp_config, 2.3, 1)
    assert loaded.pixel_mean == 0.1307
    untagged = save_checkpoint(CheckpointRecord(epoch=-1, network=record.network), tmp_path / "u.sgmc")
    assert load_checkpoint(untagged).pixel_mean is None
    _assert_same_parameters(loaded.network, record.network)


# ------------------ ORCHESTRATOR ------------------
def test_zero_baseline_epochs_search_steps_on_the_initialization(mlp_config, tiny_data, tmp_path):
    config = replace(mlp_config, baseline_epochs=0)
    expected = search_specs(build_network(config), config.bits, config.f_range)
    outcome = TrainingOrchestrator(config, tmp_path).run(*tiny_data)
    assert outcome.soft.specs == expected
    assert not (tmp_path / "baseline_metrics.csv").exists()


def test_orchestrator_pipeline_and_determinism(mlp_config, tiny_data, tmp_path):
    outcomes = []
    for name in ("a", "b"):
        outcomes.append(TrainingOrchestrator(mlp_config, tmp_path / name).run(*tiny_data))

    outcome = outcomes[0]
    assert outcome.baseline is not None and outcome.soft.phase == "sgm"
    assert set(outcome.timings) == {"baseline", "sgm", "quantize", "full"}
    summary = json.loads((tmp_path / "a" / "metrics_summary.json").read_text())
    assert {"soft", "hard", "baseline", "quantization_gap_pp", "degradation_pp", "mode_collapse"} <= set(summary)
    assert summary["hard"]["error_rate"] == pytest.approx(outcome.quantized.error_after)

    hard = load_checkpoint(tmp_path / "a" / "quantized.sgmc")
    assert hard.phase == "quantized"
    _assert_same_parameters(hard.network, outcome.quantized.network)

    for name in ("metrics.csv", "baseline_metrics.csv", "quantized.sgmc", "sgm_final.sgmc", "metrics_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
