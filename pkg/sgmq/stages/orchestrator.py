
import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from sgmq.stages.baseline_trainer import BaselineTrainer, build_network
from sgmq.stages.checkpoints import load_checkpoint, save_checkpoint
from sgmq.stages.evaluation import evaluation_report
from sgmq.stages.quantize_stage import QuantizeStage
from sgmq.stages.sgm_trainer import SGMTrainer
from sgmq.stages.types import CheckpointRecord, TrainConfig, TrainingOutcome
from sgmq.tools.idx_data_tool import Dataset
from sgmq.tools.run_io_tool import write_json
from sgmq.tools.telemetry_tool import mode_collapse_fraction


logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[ORCH] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

SOFT_CHECKPOINT = "sgm_final.sgmc"
QUANTIZED_CHECKPOINT = "quantized.sgmc"


class TrainingOrchestrator:
    """
    Main pipeline controller:
    - Float pretraining (fresh init) or load a pretrained checkpoint
    - Step search + SGM fine-tuning
    - Hard quantization
    - Evaluation summary + checkpoints
    - Log each step for observability
    """

    def __init__(self, config: TrainConfig, run_dir: Optional[Path] = None):
        self.config = config.validate()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.baseline_trainer = BaselineTrainer()
        self.sgm_trainer = SGMTrainer()
        self.quantize_stage = QuantizeStage(bits=config.bits, f_range=config.f_range)

    # ------------------ PUBLIC ------------------
    def run(self, train: Dataset, test: Dataset, resume: Optional[CheckpointRecord] = None) -> TrainingOutcome:
        outcome = self.run_with_timings(train, test, resume=resume)
        return outcome

    def run_with_timings(self, train: Dataset, test: Dataset, resume: Optional[CheckpointRecord] = None) -> TrainingOutcome:
        """
        Full pipeline; the outcome carries wall-clock seconds per stage.
        """
        timings = {}
        full_start = time.time()
        logger.info(f"Training run: arch={self.config.arch}, N={self.config.bits}, seed={self.config.seed}")

        # 1) INITIALIZATION
        t0 = time.time()
        baseline = None
        if resume is not None:
            init_network = None
        elif self.config.init == "fresh":
            baseline = self.baseline_trainer.run(
                self.config.for_baseline(),
                train,
                test,
                init_network=build_network(self.config),
                run_dir=self.run_dir,
                epochs=self.config.baseline_epochs,
            )
            init_network = baseline.network
        else:
            baseline = load_checkpoint(self.config.init)
            init_network = baseline.network
            logger.info(f"Initialized from pretrained checkpoint {self.config.init}")
        timings["baseline"] = time.time() - t0

        # 2) SGM FINE-TUNING
        t1 = time.time()
        soft = self.sgm_trainer.run(self.config, init_network, train, test, run_dir=self.run_dir, resume=resume)
        timings["sgm"] = time.time() - t1
        logger.info(f"SGM finished at epoch {soft.epoch}: soft test error {soft.test_error:.4%}")

        # 3) HARD QUANTIZATION
        t2 = time.time()
        quantized = self.quantize_stage.run(soft.network, soft.specs, test)
        timings["quantize"] = time.time() - t2

        # 4) SUMMARY + CHECKPOINTS
        summary = self._summarize(baseline, soft, quantized, test)
        if self.run_dir is not None:
            save_checkpoint(soft, self.run_dir / SOFT_CHECKPOINT)
            hard = CheckpointRecord(
                epoch=soft.epoch,
                network=quantized.network,
                specs=quantized.specs,
                lam=soft.lam,
                eta=soft.eta,
                train_loss=soft.train_loss,
                test_error=quantized.error_after,
                phase="quantized",
                config=self.config,
                telemetry=soft.telemetry,
                pixel_mean=soft.pixel_mean,
            )
            save_checkpoint(hard, self.run_dir / QUANTIZED_CHECKPOINT)
            write_json(summary, self.run_dir, "metrics_summary.json")

        timings["full"] = time.time() - full_start
        logger.info(f"Finished run in {timings['full']:.1f}s")
        return TrainingOutcome(baseline=baseline, soft=soft, quantized=quantized, summary=summary, timings=timings)

    # ------------------ INTERNAL ------------------
    def _summarize(self, baseline, soft, quantized, test: Dataset) -> dict:
        summary = {
            "n_samples": len(test),
            "soft": asdict(evaluation_report(soft.network, test)),
            "hard": asdict(evaluation_report(quantized.network, test)),
            "quantization_gap_pp": 100.0 * (quantized.error_after - quantized.error_before),
            "mode_collapse": dict(
                zip(
                    [layer.name for layer in soft.network.regularized_layers()],
                    mode_collapse_fraction(soft.network, soft.specs),
                )
            ),
            "specs": [[s.bits, s.exponent] for s in quantized.specs],
        }
        if baseline is not None:
            summary["baseline"] = asdict(evaluation_report(baseline.network, test))
            summary["degradation_pp"] = 100.0 * (quantized.error_after - summary["baseline"]["error_rate"])
        return summary
