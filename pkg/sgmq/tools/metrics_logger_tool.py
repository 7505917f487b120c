"""
Metrics Logger Tool

- Validates per-epoch metric rows
- Appends them to metrics.csv via run_io_tool
"""

import logging
import math
from typing import Dict, List

import pandas as pd

from sgmq.tools.run_io_tool import exists, read_csv, write_csv

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[METRICS_LOGGER] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)


METRICS_FILE = "metrics.csv"

REQUIRED_FIELDS = [
    "epoch",
    "eta",
    "lambda",
    "train_loss",
    "test_error",
]

RESIDUAL_PREFIX = "reg_residual_"


def metrics_columns(layer_names: List[str]) -> List[str]:
    """Fixed header: required fields, then one residual column per layer."""
    return REQUIRED_FIELDS + [f"{RESIDUAL_PREFIX}{name}" for name in layer_names]


def _validate_and_normalize(row: dict, layer_names: List[str]) -> Dict[str, float]:
    """Validate required fields and normalize into a full row dict."""
    if not isinstance(row, dict):
        raise ValueError("metrics row must be a dict.")

    columns = metrics_columns(layer_names)
    missing = [c for c in columns if c not in row or row[c] is None]
    if missing:
        raise ValueError(f"Missing required metric fields: {missing}")

    normalized = {"epoch": int(row["epoch"])}
    for column in columns[1:]:
        value = float(row[column])
        if column != "train_loss" and not math.isfinite(value):
            raise ValueError(f"metric '{column}' is not finite: {value}")
        normalized[column] = value
    return normalized


def log_epoch_metrics(run_dir, row: dict, layer_names: List[str], filename: str = METRICS_FILE) -> dict:
    """
    Validate and append one epoch row to `filename` (metrics.csv by default).

    Returns:
        The normalized row as a dict.
    """
    new_row = _validate_and_normalize(row, layer_names)
    columns = metrics_columns(layer_names)

    if exists(run_dir, filename):
        df = read_csv(run_dir, filename)
        # a resumed run overwrites epochs it repeats
        df = df[df["epoch"] < new_row["epoch"]]
        df = pd.concat([df, pd.DataFrame([new_row], columns=columns)], ignore_index=True)
    else:
        df = pd.DataFrame([new_row], columns=columns)
    write_csv(df[columns], run_dir, filename)

    logger.info(
        f"epoch={new_row['epoch']} eta={new_row['eta']:.5g} lambda={new_row['lambda']:.5g} "
        f"loss={new_row['train_loss']:.5f} test_error={new_row['test_error']:.4%}"
    )
    return new_row
