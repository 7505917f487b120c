"""
Safe run-directory CSV / JSON read/write wrapper.
"""

import fnmatch
import json
import logging
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[RUN_IO] %(asctime)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

ALLOWED = (
    "metrics.csv",
    "baseline_metrics.csv",
    "switches.csv",
    "modes_*.csv",
    "hist_*_*.csv",
    "metrics_summary.json",
    "search_*.csv",
    "snapshots/modes_*.npy",
)


def _assert_allowed(filename: str):
    if not any(fnmatch.fnmatch(filename, pattern) for pattern in ALLOWED):
        raise PermissionError(f"{filename} not allowed. Allowed: {ALLOWED}")


def make_run_dir(root, seed: int) -> Path:
    """Create runs/<timestamp>-<seed>/ under `root`."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    run_dir = Path(root) / f"{stamp}-{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Run directory: {run_dir}")
    return run_dir


def run_path(run_dir, filename: str) -> Path:
    _assert_allowed(filename)
    return Path(run_dir) / filename


def exists(run_dir, filename: str) -> bool:
    return run_path(run_dir, filename).exists()


def read_csv(run_dir, filename: str) -> pd.DataFrame:
    return pd.read_csv(run_path(run_dir, filename), float_precision="round_trip")


def write_csv(df_like, run_dir, filename: str, columns=None) -> Path:
    path = run_path(run_dir, filename)
    if isinstance(df_like, list):
        df_like = pd.DataFrame(df_like, columns=columns)
    path.parent.mkdir(parents=True, exist_ok=True)
    df_like.to_csv(path, index=False, lineterminator="\n")
    return path


def write_json(obj, run_dir, filename: str) -> Path:
    path = run_path(run_dir, filename)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_array(array, run_dir, filename: str) -> Path:
    path = run_path(run_dir, filename)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.save(f, array, allow_pickle=False)
    return path


def read_array(run_dir, filename: str):
    return np.load(run_path(run_dir, filename), allow_pickle=False)
