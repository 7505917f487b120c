
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

from sgmq.errors import ConfigError
from sgmq.tools.fixed_point_tool import MAX_BITS, MIN_BITS, QuantizerSpec
from sgmq.tools.nn_engine_tool import SUPPORTED_DTYPES, Network
from sgmq.tools.sgm_regularizer_tool import DEFAULT_F_RANGE, LambdaSchedule

ARCHITECTURES = ("lenet5", "mlp")


@dataclass(frozen=True)
class TrainConfig:
    """
    One training run. Defaults follow the MNIST protocol: 2 bits, 80 epochs,
    batch 64, lr 0.01 -> 0.001, lambda 0 -> 1000.
    """
    bits: int = 2
    epochs: int = 80
    batch_size: int = 64
    lr_start: float = 0.01
    lr_end: float = 0.001
    lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    seed: int = 0
    f_range: Tuple[int, int] = DEFAULT_F_RANGE
    init: str = "fresh"  # or a path to a float checkpoint
    arch: str = "lenet5"
    baseline_epochs: int = 10
    baseline_lr_start: float = 0.05
    baseline_lr_end: float = 0.005
    limit: Optional[int] = None
    validation_split: bool = False
    dtype: str = "float64"
    scale_by_count: bool = True
    hist_every: int = 10
    switch_interval: int = 10

    def validate(self) -> "TrainConfig":
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ConfigError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.baseline_epochs < 0:
            raise ConfigError(f"baseline_epochs must be >= 0, got {self.baseline_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start}:{self.lr_end}")
        if not self.baseline_lr_start >= self.baseline_lr_end > 0:
            raise ConfigError(
                f"need baseline lr_start >= lr_end > 0, got {self.baseline_lr_start}:{self.baseline_lr_end}"
            )
        if self.lambda_schedule.total_epochs != self.epochs:
            raise ConfigError(
                f"lambda schedule spans {self.lambda_schedule.total_epochs} epochs, training runs {self.epochs}"
            )
        if self.f_range[0] > self.f_range[1]:
            raise ConfigError(f"empty exponent range {self.f_range}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture '{self.arch}', expected one of {ARCHITECTURES}")
        if self.dtype not in SUPPORTED_DTYPES:
            raise ConfigError(f"unknown dtype '{self.dtype}', expected one of {SUPPORTED_DTYPES}")
        if self.limit is not None and self.limit < 1:
            raise ConfigError(f"limit must be >= 1, got {self.limit}")
        if self.hist_every < 0 or self.switch_interval < 1:
            raise ConfigError("hist_every must be >= 0 and switch_interval >= 1")
        return self

    def for_baseline(self) -> "TrainConfig":
        """Float pretraining: no regularizer, baseline length and learning rates."""
        epochs = max(self.baseline_epochs, 1)
        return replace(
            self,
            epochs=epochs,
            lr_start=self.baseline_lr_start,
            lr_end=self.baseline_lr_end,
            lambda_schedule=LambdaSchedule(0.0, 0.0, epochs),
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["f_range"] = list(self.f_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        data["lambda_schedule"] = LambdaSchedule(**data["lambda_schedule"])
        data["f_range"] = tuple(data["f_range"])
        return cls(**data)


@dataclass
class CheckpointRecord:
    """
    State after a completed epoch; `epoch` is the 0-based index of that
    epoch (-1 for an untrained initialization).
    """
    epoch: int
    network: Network
    specs: List[QuantizerSpec] = field(default_factory=list)
    lam: float = 0.0
    eta: float = 0.0
    train_loss: float = float("nan")
    test_error: float = float("nan")
    phase: str = "baseline"  # baseline | sgm | quantized
    config: Optional[TrainConfig] = None
    telemetry: List[str] = field(default_factory=list)
    initial_loss: Optional[float] = None
    divergence_strikes: int = 0
    pixel_mean: Optional[float] = None  # training-set mean the network expects


@dataclass
class EvaluationReport:
    """
    Output of evaluation_report(); mirrors metrics_summary.json.
    """
    samples: int
    error_rate: float
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float


@dataclass
class QuantizeResult:
    """
    Output from QuantizeStage.
    """
    network: Network
    specs: List[QuantizerSpec]
    error_before: float
    error_after: float
    searched: bool = False

    @property
    def error_delta(self) -> float:
        return self.error_after - self.error_before


@dataclass
class TrainingOutcome:
    """
    Output from TrainingOrchestrator.
    """
    baseline: Optional[CheckpointRecord]
    soft: CheckpointRecord
    quantized: QuantizeResult
    summary: Dict[str, Any] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
