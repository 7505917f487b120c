"""
Save / load CheckpointRecord objects through the SGMC container.
"""

import math
from pathlib import Path

from sgmq.stages.types import CheckpointRecord, TrainConfig
from sgmq.tools.fixed_point_tool import QuantizerSpec
from sgmq.tools.model_codec_tool import read_checkpoint, write_checkpoint


def _json_float(value):
    # JSON has no NaN; missing metrics are stored as null
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return None
    return float(value)


def save_checkpoint(record: CheckpointRecord, path) -> Path:
    meta = {
        "epoch": record.epoch,
        "specs": [[s.bits, s.exponent] for s in record.specs],
        "lambda": _json_float(record.lam),
        "eta": _json_float(record.eta),
        "train_loss": _json_float(record.train_loss),
        "test_error": _json_float(record.test_error),
        "phase": record.phase,
        "config": record.config.to_dict() if record.config is not None else None,
        "telemetry": list(record.telemetry),
        "initial_loss": _json_float(record.initial_loss),
        "divergence_strikes": record.divergence_strikes,
        "pixel_mean": _json_float(record.pixel_mean),
    }
    return write_checkpoint(record.network, meta, path)


def load_checkpoint(path) -> CheckpointRecord:
    network, meta = read_checkpoint(path)

    def _float(key):
        value = meta.get(key)
        return float("nan") if value is None else float(value)

    return CheckpointRecord(
        epoch=int(meta.get("epoch", -1)),
        network=network,
        specs=[QuantizerSpec(bits=b, exponent=f) for b, f in meta.get("specs", [])],
        lam=_float("lambda"),
        eta=_float("eta"),
        train_loss=_float("train_loss"),
        test_error=_float("test_error"),
        phase=meta.get("phase", "baseline"),
        config=TrainConfig.from_dict(meta["config"]) if meta.get("config") else None,
        telemetry=list(meta.get("telemetry", [])),
        initial_loss=meta.get("initial_loss"),
        divergence_strikes=int(meta.get("divergence_strikes", 0)),
        pixel_mean=meta.get("pixel_mean"),
    )
