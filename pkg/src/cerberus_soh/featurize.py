"""Model-ready inputs: downsampling, z-scoring, sliding relaxation windows
and expanding capacity-history windows."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .battery_data import CellHistory, RelaxationCurve
from .errors import DataError, DegenerateDataError, ResamplingError

log = logging.getLogger(__name__)

WINDOW_INTERVAL_S = 120.0
WINDOW_SIZE = {"charge": 10, "discharge": 15}
MIN_HISTORY = 10
MAX_LABEL = 1.2


@dataclass(frozen=True)
class Normalizer:
    mean_charge: float
    std_charge: float
    mean_discharge: float
    std_discharge: float
    capacity_scale: float

    def __post_init__(self):
        if not (self.std_charge > 0 and self.std_discharge > 0 and self.capacity_scale > 0):
            raise DegenerateDataError(f"normalizer needs positive stds and scale: {self}")

    def stats(self, kind: str) -> tuple[float, float]:
        if kind == "charge":
            return self.mean_charge, self.std_charge
        if kind == "discharge":
            return self.mean_discharge, self.std_discharge
        raise ValueError(f"unknown relaxation kind {kind!r}")

    def zscore(self, voltage: np.ndarray, kind: str) -> np.ndarray:
        mean, std = self.stats(kind)
        return (np.asarray(voltage, dtype=np.float64) - mean) / std

    def unzscore(self, z: np.ndarray, kind: str) -> np.ndarray:
        mean, std = self.stats(kind)
        return np.asarray(z) * std + mean


@dataclass(frozen=True)
class WindowSample:
    kind: str
    values: np.ndarray
    cell_id: str
    cycle_index: int
    label: float | None  # capacity / capacity_scale


@dataclass(frozen=True)
class HistoryWindow:
    cell_id: str
    end_cycle: int
    values: np.ndarray  # normalized capacities, extrapolated to >= MIN_HISTORY
    n_real: int  # measured cycles at the tail of ``values``
    target: float | None = None  # normalized capacity of end_cycle + 1

    def __len__(self) -> int:
        return len(self.values)


def downsample(curve: RelaxationCurve, target_interval: float = WINDOW_INTERVAL_S) -> RelaxationCurve:
    """Keep the samples at t = 0, target, 2*target, ... (no interpolation)."""
    ratio = target_interval / curve.native_interval
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-9 * max(1.0, ratio):
        raise ResamplingError(
            f"target interval {target_interval} s is not an integer multiple of {curve.native_interval} s"
        )
    if step == 1:
        return curve
    return replace(curve, time=curve.time[::step].copy(), voltage=curve.voltage[::step].copy(),
                   native_interval=float(target_interval))


def fit_normalizer(training_curves: Iterable[RelaxationCurve], nominal_capacity: float) -> Normalizer:
    """Per-kind population mean/std over all pooled training voltages."""
    pools: dict[str, list[np.ndarray]] = {"charge": [], "discharge": []}
    for c in training_curves:
        pools[c.kind].append(c.voltage)
    stats = {}
    for kind, chunks in pools.items():
        if not chunks:
            raise DataError(f"no {kind} relaxation curves to fit the normalizer")
        v = np.concatenate(chunks)
        mean, std = float(v.mean()), float(v.std())
        if not std > 0:
            raise DegenerateDataError(f"{kind} relaxation voltages have zero variance")
        stats[kind] = (mean, std)
    return Normalizer(*stats["charge"], *stats["discharge"], capacity_scale=float(nominal_capacity))


def slide_windows(
    curve: RelaxationCurve,
    size: int,
    label: float | None,
    norm: Normalizer,
    stride: int = 1,
    interval: float = WINDOW_INTERVAL_S,
) -> list[WindowSample]:
    """Z-scored windows of ``size`` samples every ``stride`` samples.

    ``label`` is the cycle capacity in Ah (``None`` at inference time). A curve
    shorter than ``size`` yields no windows.
    """
    if abs(curve.native_interval - interval) > 1.0:
        raise ResamplingError(f"curve sampled every {curve.native_interval} s, windows expect {interval} s")
    scaled = None
    if label is not None:
        scaled = float(label) / norm.capacity_scale
        if not 0 < scaled <= MAX_LABEL:
            raise DataError(f"cell {curve.cell_id} cycle {curve.cycle_index}: label {scaled:.4f} outside (0, {MAX_LABEL}]")
    if len(curve) < size:
        log.warning("cell %s cycle %d: %s rest has %d samples < window %d, skipped",
                    curve.cell_id, curve.cycle_index, curve.kind, len(curve), size)
        return []
    z = norm.zscore(curve.voltage, curve.kind)
    views = np.lib.stride_tricks.sliding_window_view(z, size)[::stride]
    return [WindowSample(curve.kind, v.copy(), curve.cell_id, curve.cycle_index, scaled) for v in views]


def linear_extrapolate_history(capacities: Sequence[float], min_len: int = MIN_HISTORY) -> np.ndarray:
    """Prepend points on the least-squares line so the history has ``min_len`` entries.

    >>> linear_extrapolate_history([3.5] * 4).tolist() == [3.5] * 10
    True
    """
    y = np.asarray(capacities, dtype=np.float64)
    if y.size == 0:
        raise DataError("empty capacity history")
    n = y.size
    if n >= min_len:
        return y.copy()
    x = np.arange(n, dtype=np.float64)
    if n == 1:
        slope, intercept = 0.0, y[0]
    else:
        xc = x - x.mean()
        slope = float(xc @ (y - y.mean()) / (xc @ xc))
        intercept = float(y.mean() - slope * x.mean())
    back = np.arange(n - min_len, 0, dtype=np.float64)
    pre = np.maximum(intercept + slope * back, 1e-6)
    return np.concatenate([pre, y])


def history_window(
    capacities: Sequence[float],
    cell_id: str,
    end_cycle: int,
    norm: Normalizer,
    target: float | None = None,
) -> HistoryWindow:
    """Window over the measured capacities (Ah) ending at ``end_cycle``."""
    y = np.asarray(capacities, dtype=np.float64) / norm.capacity_scale
    if np.any(y <= 0):
        raise DataError(f"cell {cell_id}: non-positive capacity in history")
    return HistoryWindow(
        cell_id=cell_id,
        end_cycle=int(end_cycle),
        values=linear_extrapolate_history(y),
        n_real=len(y),
        target=None if target is None else float(target) / norm.capacity_scale,
    )


def expand_history(history: CellHistory, norm: Normalizer) -> list[HistoryWindow]:
    """Expanding windows with a fixed left endpoint, one per next-cycle target."""
    if len(history) < 2:
        raise DataError(f"cell {history.cell_id}: need >= 2 cycles for history windows, got {len(history)}")
    caps = history.capacities
    return [
        history_window(caps[: e + 1], history.cell_id, int(history.cycles[e]), norm, target=caps[e + 1])
        for e in range(len(history) - 1)
    ]


def write_windows_csv(windows: Iterable[WindowSample]) -> str:
    width = max(WINDOW_SIZE.values())
    out = io.StringIO()
    out.write("kind,cell_id,cycle_index,label," + ",".join(f"v{i}" for i in range(width)) + "\n")
    for w in windows:
        vals = [repr(float(v)) for v in w.values] + [""] * (width - len(w.values))
        label = "" if w.label is None else repr(float(w.label))
        out.write(f"{w.kind},{w.cell_id},{w.cycle_index},{label}," + ",".join(vals) + "\n")
    return out.getvalue()
