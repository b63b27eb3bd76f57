"""Cycling telemetry ingestion: canonical CSV parsing, relaxation extraction
and coulomb-counted capacity labels."""

from __future__ import annotations

import io
import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from .errors import DataError, MissingStepError, SchemaError

log = logging.getLogger(__name__)

NOMINAL_CAPACITY_AH = 3.5
CSV_COLUMNS = ("cell_id", "cycle_index", "step_kind", "time_s", "current_a", "voltage_v")
CSV_HEADER = ",".join(CSV_COLUMNS)

VOLTAGE_BAND = (2.0, 4.5)
REST_CURRENT_TOL_A = 1e-3
SPACING_TOL_S = 1.0


class StepKind(str, Enum):
    CHARGE_CC = "charge_cc"
    CHARGE_CV = "charge_cv"
    REST_AFTER_CHARGE = "rest_after_charge"
    DISCHARGE_CC = "discharge_cc"
    REST_AFTER_DISCHARGE = "rest_after_discharge"


# protocol order
STEP_ORDER = {kind: i for i, kind in enumerate(StepKind)}
REST_STEP = {"charge": StepKind.REST_AFTER_CHARGE, "discharge": StepKind.REST_AFTER_DISCHARGE}


@dataclass
class Step:
    kind: StepKind
    time: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    # 1-based source line of each point, when parsed from a file
    rows: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.time)


@dataclass
class CycleRecord:
    cell_id: str
    cycle_index: int
    steps: list[Step]
    charge_rate: float = 0.0
    capacity: float | None = None

    def step(self, kind: StepKind) -> Step | None:
        for s in self.steps:
            if s.kind == kind:
                return s
        return None


@dataclass
class RelaxationCurve:
    cell_id: str
    cycle_index: int
    kind: str  # "charge" | "discharge"
    time: np.ndarray
    voltage: np.ndarray
    native_interval: float

    def __len__(self) -> int:
        return len(self.time)


@dataclass
class CellHistory:
    cell_id: str
    charge_rate: float
    cycles: np.ndarray  # int, strictly increasing
    capacities: np.ndarray  # Ah

    def __len__(self) -> int:
        return len(self.cycles)

    @property
    def pairs(self) -> list[tuple[int, float]]:
        return [(int(n), float(q)) for n, q in zip(self.cycles, self.capacities)]


def _line_of(i: int) -> int:
    # header is line 1
    return i + 2


def _read_frame(text: str) -> pd.DataFrame:
    first = text.lstrip("﻿").split("\n", 1)[0].strip().rstrip("\r")
    header = [c.strip() for c in first.split(",")] if first else []
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    if tuple(header) != CSV_COLUMNS:
        raise SchemaError(f"header must be exactly '{CSV_HEADER}', got '{first}'")

    raw = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    if raw.empty:
        return raw

    frame = pd.DataFrame({"cell_id": raw["cell_id"].str.strip()})
    kinds = raw["step_kind"].str.strip()
    bad = ~kinds.isin([k.value for k in StepKind])
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"unknown step_kind {kinds.iloc[i]!r}", row=_line_of(i))
    frame["step_kind"] = kinds
    empty_id = (frame["cell_id"] == "").to_numpy()
    if empty_id.any():
        raise DataError("empty cell_id", row=_line_of(int(np.flatnonzero(empty_id)[0])))

    cyc = pd.to_numeric(raw["cycle_index"].str.strip(), errors="coerce")
    bad = (cyc.isna() | (cyc <= 0) | (cyc != np.floor(cyc))).to_numpy()
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"cycle_index must be a positive integer, got {raw['cycle_index'].iloc[i]!r}",
                        row=_line_of(i))
    frame["cycle_index"] = cyc.astype(np.int64)

    for col in ("time_s", "current_a", "voltage_v"):
        # correctly rounded string->double, so repr-formatted values round-trip exactly
        strings = raw[col].to_numpy()
        try:
            vals = strings.astype(np.float64)
        except ValueError:
            for i, s in enumerate(strings):
                try:
                    float(s)
                except ValueError:
                    raise DataError(f"{col} is not a number: {s!r}", row=_line_of(i)) from None
            raise
        if not np.all(np.isfinite(vals)):
            i = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise DataError(f"{col} is not finite", row=_line_of(i))
        frame[col] = vals

    v = frame["voltage_v"].to_numpy()
    bad = (v < VOLTAGE_BAND[0]) | (v > VOLTAGE_BAND[1])
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"voltage {v[i]} V outside sanity band {VOLTAGE_BAND}", row=_line_of(i))
    frame["row"] = np.arange(len(frame)) + 2
    return frame


def infer_charge_rate(record: CycleRecord, nominal_capacity: float = NOMINAL_CAPACITY_AH) -> float:
    """C-rate of the constant-current charge, 0.0 when the step is absent."""
    step = record.step(StepKind.CHARGE_CC)
    if step is None or len(step) == 0:
        return 0.0
    return round(float(np.mean(np.abs(step.current))) / nominal_capacity, 3)


def parse_cycling_csv(text: str, nominal_capacity: float = NOMINAL_CAPACITY_AH) -> list[CycleRecord]:
    """Parse a canonical cycling CSV document into cycle records.

    Rows may arrive in any order; they are grouped by ``(cell_id,
    cycle_index, step_kind)`` with steps placed in protocol order. Within a
    step the file order is kept and time must be strictly increasing.
    Errors name the 1-based source line (header is line 1).
    """
    frame = _read_frame(text)
    if frame.empty:
        return []

    frame["order"] = frame["step_kind"].map({k.value: i for k, i in STEP_ORDER.items()})
    frame = frame.sort_values(["cell_id", "cycle_index", "order"], kind="stable").reset_index(drop=True)

    cell = frame["cell_id"].to_numpy()
    cyc = frame["cycle_index"].to_numpy()
    order = frame["order"].to_numpy()
    t = frame["time_s"].to_numpy()
    rows = frame["row"].to_numpy()

    new_step = np.ones(len(frame), dtype=bool)
    new_step[1:] = (cell[1:] != cell[:-1]) | (cyc[1:] != cyc[:-1]) | (order[1:] != order[:-1])
    backwards = ~new_step[1:] & (np.diff(t) <= 0)
    if backwards.any():
        i = int(np.flatnonzero(backwards)[0]) + 1
        raise DataError("time not strictly increasing within step", row=int(rows[i]))

    cur = frame["current_a"].to_numpy()
    volt = frame["voltage_v"].to_numpy()
    kinds = list(StepKind)
    starts = np.flatnonzero(new_step)
    ends = np.append(starts[1:], len(frame))

    records: list[CycleRecord] = []
    for s, e in zip(starts, ends):
        key = (str(cell[s]), int(cyc[s]))
        if not records or (records[-1].cell_id, records[-1].cycle_index) != key:
            records.append(CycleRecord(cell_id=key[0], cycle_index=key[1], steps=[]))
        records[-1].steps.append(
            Step(kinds[order[s]], t[s:e].copy(), cur[s:e].copy(), volt[s:e].copy(), rows[s:e].copy())
        )
    for rec in records:
        rec.charge_rate = infer_charge_rate(rec, nominal_capacity)
    return records


def read_cycling_files(paths: Iterable[str | Path], nominal_capacity: float = NOMINAL_CAPACITY_AH) -> list[CycleRecord]:
    records: list[CycleRecord] = []
    for path in paths:
        path = Path(path)
        try:
            records.extend(parse_cycling_csv(path.read_text(encoding="utf-8"), nominal_capacity))
        except DataError as exc:
            raise type(exc)(f"{path.name}: {exc}") from None
    return records


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cycling_csv(records: Iterable[CycleRecord]) -> str:
    """Serialize records to the canonical CSV; floats use shortest round-trip repr."""
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for rec in records:
        for step in rec.steps:
            prefix = f"{rec.cell_id},{rec.cycle_index},{step.kind.value},"
            out.writelines(
                f"{prefix}{_fmt(t)},{_fmt(i)},{_fmt(v)}\n"
                for t, i, v in zip(step.time.tolist(), step.current.tolist(), step.voltage.tolist())
            )
    return out.getvalue()


def coulomb_count_discharge(cycle: CycleRecord) -> float:
    """Discharge capacity in Ah by trapezoidal integration of |I| over the
    constant-current discharge. The result is also stored on ``cycle``."""
    step = cycle.step(StepKind.DISCHARGE_CC)
    if step is None or len(step) < 2:
        raise MissingStepError(
            f"cell {cycle.cell_id} cycle {cycle.cycle_index}: discharge_cc step with >= 2 points required"
        )
    capacity = float(np.trapezoid(np.abs(step.current), step.time)) / 3600.0
    if not capacity > 0:
        raise DataError(f"cell {cycle.cell_id} cycle {cycle.cycle_index}: non-positive capacity")
    cycle.capacity = capacity
    return capacity


def extract_relaxation(cycle: CycleRecord, kind: str) -> RelaxationCurve:
    if kind not in REST_STEP:
        raise ValueError(f"kind must be 'charge' or 'discharge', got {kind!r}")
    where = f"cell {cycle.cell_id} cycle {cycle.cycle_index}"
    step = cycle.step(REST_STEP[kind])
    if step is None or len(step) < 2:
        raise MissingStepError(f"{where}: {REST_STEP[kind].value} step with >= 2 samples required")

    loud = np.abs(step.current) > REST_CURRENT_TOL_A
    if loud.any():
        i = int(np.flatnonzero(loud)[0])
        row = int(step.rows[i]) if step.rows is not None else None
        raise DataError(f"{where}: rest current {step.current[i]} A exceeds {REST_CURRENT_TOL_A} A", row=row)

    t = step.time - step.time[0]
    dt = np.diff(t)
    interval = float(np.median(dt))
    if np.any(np.abs(dt - interval) > SPACING_TOL_S):
        raise DataError(f"{where}: irregular {kind} rest sampling (median spacing {interval} s)")
    return RelaxationCurve(cycle.cell_id, cycle.cycle_index, kind, t, step.voltage.copy(), interval)


def build_cell_history(cycles: list[CycleRecord]) -> CellHistory:
    if not cycles:
        raise DataError("no cycles")
    ids = {c.cell_id for c in cycles}
    if len(ids) != 1:
        raise DataError(f"cycles from several cells: {sorted(ids)}")
    seen = Counter(c.cycle_index for c in cycles)
    dup = sorted(n for n, k in seen.items() if k > 1)
    if dup:
        raise DataError(f"cell {cycles[0].cell_id}: duplicate cycle_index {dup[0]}")

    ordered = sorted(cycles, key=lambda c: c.cycle_index)
    caps = np.array([c.capacity if c.capacity is not None else coulomb_count_discharge(c) for c in ordered])
    rates = Counter(c.charge_rate for c in ordered)
    return CellHistory(
        cell_id=ordered[0].cell_id,
        charge_rate=rates.most_common(1)[0][0],
        cycles=np.array([c.cycle_index for c in ordered], dtype=np.int64),
        capacities=caps,
    )


def group_by_cell(records: Iterable[CycleRecord]) -> dict[str, list[CycleRecord]]:
    cells: dict[str, list[CycleRecord]] = {}
    for rec in records:
        cells.setdefault(rec.cell_id, []).append(rec)
    for recs in cells.values():
        recs.sort(key=lambda r: r.cycle_index)
    return cells
