"""
Telemetry Tool

Mode tracking for soft-quantized training:
- per-epoch snapshots of every weight's level index
- switch ratios between snapshots
- weight histograms over the quantizer's range
- CSV outputs for external plotting
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from sgmq.errors import ShapeError
from sgmq.tools.fixed_point_tool import QuantizerSpec, mode_indices, quantize_tensor, step_size
from sgmq.tools.run_io_tool import read_array, write_array, write_csv

logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter("[TELEMETRY] %(asctime)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(logging.INFO)

SNAPSHOT_FILE = "snapshots/modes_{epoch:04d}.npy"
SWITCH_COLUMNS = ["epoch_from", "epoch_to", "layer", "ratio"]
HIST_COLUMNS = ["bin_left", "bin_right", "count"]


@dataclass(frozen=True)
class ModeSnapshot:
    """
    Level index of every regularized weight at one epoch.
    `indices[l]` is the flattened int8 index array of layer_id l + 1.
    """
    epoch: int
    indices: Tuple[np.ndarray, ...]
    specs: Tuple[QuantizerSpec, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.specs):
            raise ShapeError(f"{len(self.indices)} index arrays for {len(self.specs)} specs")
        for layer_id, (idx, spec) in enumerate(zip(self.indices, self.specs), start=1):
            if idx.size and np.abs(idx.astype(np.int16)).max() > spec.max_index:
                raise ShapeError(f"layer {layer_id}: mode index outside +/-{spec.max_index}")


@dataclass(frozen=True)
class HistogramRecord:
    epoch: int
    layer_id: int
    edges: np.ndarray
    counts: np.ndarray


def snapshot_modes(network, specs: Sequence[QuantizerSpec], epoch: int) -> ModeSnapshot:
    layers = network.regularized_layers()
    if len(layers) != len(specs):
        raise ShapeError(f"{len(specs)} specs for {len(layers)} regularized layers")
    indices = tuple(mode_indices(layer.weight.ravel(), spec) for layer, spec in zip(layers, specs))
    return ModeSnapshot(epoch=int(epoch), indices=indices, specs=tuple(specs))


def switch_ratio(a: ModeSnapshot, b: ModeSnapshot, layer_id: int) -> float:
    """Fraction of weights of layer `layer_id` whose mode index differs."""
    if not 1 <= layer_id <= len(a.indices) or len(a.indices) != len(b.indices):
        raise ShapeError(f"layer {layer_id} not present in both snapshots")
    ia, ib = a.indices[layer_id - 1], b.indices[layer_id - 1]
    if ia.shape != ib.shape or a.specs[layer_id - 1] != b.specs[layer_id - 1]:
        raise ShapeError(f"layer {layer_id}: snapshots differ in shape or quantizer spec")
    if ia.size == 0:
        return 0.0
    return float(np.count_nonzero(ia != ib)) / ia.size


def weight_histogram(network, layer_id: int, spec: QuantizerSpec, bins: int = 101, epoch: int = 0) -> HistogramRecord:
    """
    Uniform histogram over [-2^(N-1) step, +2^(N-1) step]; weights outside
    the range land in the extreme bins.
    """
    if bins < 3:
        raise ShapeError(f"histogram needs at least 3 bins, got {bins}")
    layers = network.regularized_layers()
    if not 1 <= layer_id <= len(layers):
        raise ShapeError(f"no regularized layer with id {layer_id}")
    w = layers[layer_id - 1].weight.ravel().astype(np.float64)
    if w.size == 0:
        raise ShapeError(f"layer {layer_id} is empty")
    half_range = 2 ** (spec.bits - 1) * step_size(spec)
    edges = np.linspace(-half_range, half_range, bins + 1)
    counts, _ = np.histogram(np.clip(w, -half_range, half_range), bins=edges)
    return HistogramRecord(epoch=int(epoch), layer_id=layer_id, edges=edges, counts=counts.astype(np.int64))


def mode_collapse_fraction(network, specs: Sequence[QuantizerSpec], tol: float = 0.1) -> List[float]:
    """Per layer, the fraction of weights within tol * step of a level."""
    fractions = []
    for layer, spec in zip(network.regularized_layers(), specs):
        w = layer.weight.astype(np.float64)
        dist = np.abs(w - quantize_tensor(w, spec))
        fractions.append(float(np.mean(dist <= tol * step_size(spec))))
    return fractions


def mode_counts(snapshot: ModeSnapshot, layer_id: int) -> Dict[int, int]:
    spec = snapshot.specs[layer_id - 1]
    idx = snapshot.indices[layer_id - 1].astype(np.int64)
    counts = np.bincount(idx + spec.max_index, minlength=2 * spec.max_index + 1)
    return {k - spec.max_index: int(c) for k, c in enumerate(counts)}


class TelemetryRecorder:
    """
    TelemetryRecorder

    Responsibilities:
    - Take a snapshot of every regularized layer once per epoch.
    - Persist raw snapshots so a resumed run rebuilds the same history.
    - Write modes_<layer>.csv, switches.csv and hist_<layer>_<epoch>.csv.

    Interface:
    - __init__(run_dir, layer_names, specs, hist_every=10, switch_interval=10, bins=101)
    - record(network, epoch, final=False) -> ModeSnapshot
    - load_history(upto_epoch)
    - flush()
    """

    def __init__(
        self,
        run_dir: Optional[Path],
        layer_names: Sequence[str],
        specs: Sequence[QuantizerSpec],
        hist_every: int = 10,
        switch_interval: int = 10,
        bins: int = 101,
    ):
        self.run_dir = run_dir
        self.layer_names = list(layer_names)
        self.specs = list(specs)
        self.hist_every = hist_every
        self.switch_interval = switch_interval
        self.bins = bins
        self.snapshots: List[ModeSnapshot] = []

    # ------------------ PUBLIC ------------------
    def record(self, network, epoch: int, final: bool = False) -> ModeSnapshot:
        snapshot = snapshot_modes(network, self.specs, epoch)
        self.snapshots = [s for s in self.snapshots if s.epoch < epoch] + [snapshot]

        if self.run_dir is not None:
            write_array(np.concatenate(snapshot.indices), self.run_dir, SNAPSHOT_FILE.format(epoch=epoch))
            if final or (self.hist_every and epoch % self.hist_every == 0):
                self._write_histograms(network, epoch)
            self.flush()
        return snapshot

    def load_history(self, upto_epoch: int, network) -> None:
        """Reload persisted snapshots for epochs 0..upto_epoch."""
        sizes = [layer.weight.size for layer in network.regularized_layers()]
        splits = np.cumsum(sizes)[:-1]
        self.snapshots = []
        for epoch in range(upto_epoch + 1):
            flat = read_array(self.run_dir, SNAPSHOT_FILE.format(epoch=epoch))
            self.snapshots.append(
                ModeSnapshot(epoch=epoch, indices=tuple(np.split(flat, splits)), specs=tuple(self.specs))
            )
        logger.info(f"Reloaded {len(self.snapshots)} mode snapshot(s) up to epoch {upto_epoch}")

    def switch_rows(self) -> List[dict]:
        by_epoch = {s.epoch: s for s in self.snapshots}
        rows = []
        for snap in self.snapshots:
            later = by_epoch.get(snap.epoch + self.switch_interval)
            if later is None:
                continue
            for layer_id, name in enumerate(self.layer_names, start=1):
                rows.append({
                    "epoch_from": snap.epoch,
                    "epoch_to": later.epoch,
                    "layer": name,
                    "ratio": switch_ratio(snap, later, layer_id),
                })
        return rows

    def flush(self) -> None:
        if self.run_dir is None:
            return
        for layer_id, name in enumerate(self.layer_names, start=1):
            max_index = self.specs[layer_id - 1].max_index
            columns = ["epoch"] + [f"mode_{k}" for k in range(-max_index, max_index + 1)]
            rows = []
            for snap in self.snapshots:
                counts = mode_counts(snap, layer_id)
                row = {"epoch": snap.epoch}
                row.update({f"mode_{k}": c for k, c in counts.items()})
                rows.append(row)
            write_csv(rows, self.run_dir, f"modes_{name}.csv", columns=columns)
        write_csv(self.switch_rows(), self.run_dir, "switches.csv", columns=SWITCH_COLUMNS)

    # ------------------ INTERNAL ------------------
    def _write_histograms(self, network, epoch: int) -> None:
        for layer_id, (name, spec) in enumerate(zip(self.layer_names, self.specs), start=1):
            record = weight_histogram(network, layer_id, spec, bins=self.bins, epoch=epoch)
            rows = [
                {"bin_left": float(lo), "bin_right": float(hi), "count": int(c)}
                for lo, hi, c in zip(record.edges[:-1], record.edges[1:], record.counts)
            ]
            write_csv(rows, self.run_dir, f"hist_{name}_{epoch}.csv", columns=HIST_COLUMNS)
