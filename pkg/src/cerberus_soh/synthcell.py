"""Seeded synthetic cell fleet with known capacity trajectories.

Relaxation rests follow an exponential approach to an SoH-dependent
asymptote: the post-charge plateau sinks and the post-discharge plateau
rises as the cell fades, and both settle more slowly. This is a test
oracle with the right qualitative signatures, not an electrochemical model.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .battery_data import CycleRecord, RelaxationCurve, Step, StepKind, write_cycling_csv
from .errors import InputError, SpecError

log = logging.getLogger(__name__)

V_MAX = 4.2
V_MIN = 2.65
REST_S = 1800.0
REST_DT = 60.0
DISCHARGE_DT = 2.0


@dataclass(frozen=True)
class SynthCellSpec:
    cell_id: str
    nominal_capacity: float = 3.5
    cycles: int = 300
    fade_mode: str = "linear"  # "linear" | "knee"
    linear_rate: float = 0.2 / 300  # fraction of q0 per cycle
    knee_cycle: int = 10**9
    knee_quadratic: float = 0.0  # fraction of q0 per cycle^2 past the knee
    charge_rate: float = 0.5
    relax_tau_charge: float = 300.0
    relax_tau_discharge: float = 400.0
    aging_tau_slope: float = 0.5
    noise_sigma: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.nominal_capacity <= 0:
            raise SpecError(f"{self.cell_id}: nominal_capacity must be positive")
        if self.noise_sigma < 0:
            raise SpecError(f"{self.cell_id}: noise_sigma must be >= 0")
        if self.fade_mode not in ("linear", "knee"):
            raise SpecError(f"{self.cell_id}: unknown fade_mode {self.fade_mode!r}")
        if self.cycles < 1:
            raise SpecError(f"{self.cell_id}: need at least one cycle")


def capacity_at(spec: SynthCellSpec, n) -> np.ndarray:
    """Analytic capacity (Ah) at cycle number(s) ``n``; q(0) = nominal."""
    n = np.asarray(n, dtype=np.float64)
    frac = 1.0 - spec.linear_rate * n
    if spec.fade_mode == "knee":
        frac = frac - spec.knee_quadratic * np.maximum(0.0, n - spec.knee_cycle) ** 2
    q0 = spec.nominal_capacity
    q = q0 * frac
    if np.any(q < 0.5 * q0):
        log.warning("%s: trajectory clipped at 0.5 * nominal", spec.cell_id)
    return np.maximum(q, 0.5 * q0)


def soh_trajectory(spec: SynthCellSpec) -> np.ndarray:
    """Capacities (Ah) for cycles 1..spec.cycles."""
    return capacity_at(spec, np.arange(1, spec.cycles + 1))


def relaxation_curve(spec: SynthCellSpec, soh: float, kind: str,
                     rng: np.random.Generator | None = None, cycle_index: int = 0) -> RelaxationCurve:
    if not 0 < soh <= 1:
        raise InputError(f"soh must be in (0, 1], got {soh}")
    t = np.arange(0.0, REST_S + REST_DT / 2, REST_DT)
    fade = 1.0 - soh
    if kind == "charge":
        tau = spec.relax_tau_charge * (1.0 + spec.aging_tau_slope * fade)
        v_inf = 4.08 - 0.04 * fade / 0.2
        v = v_inf + (V_MAX - v_inf) * np.exp(-t / tau)
    elif kind == "discharge":
        tau = spec.relax_tau_discharge * (1.0 + spec.aging_tau_slope * fade)
        v_inf = 3.20 + 0.08 * fade / 0.2
        v = v_inf - (v_inf - V_MIN) * np.exp(-t / tau)
    else:
        raise InputError(f"kind must be 'charge' or 'discharge', got {kind!r}")
    if spec.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(spec.seed)
        v = v + rng.normal(0.0, spec.noise_sigma, size=v.shape)
    return RelaxationCurve(spec.cell_id, cycle_index, kind, t, v, REST_DT)


def _cell_rng(spec: SynthCellSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, spec.seed, zlib.crc32(spec.cell_id.encode())])


def _cycle(spec: SynthCellSpec, n: int, q: float, rng: np.random.Generator) -> CycleRecord:
    q0 = spec.nominal_capacity
    soh = min(q / q0, 1.0)
    i_chg = spec.charge_rate * q0
    steps = []

    # coarse CC-CV charge: 10 + 6 points
    t_cc = 0.9 * q / i_chg * 3600.0
    t = np.linspace(0.0, t_cc, 10)
    steps.append(Step(StepKind.CHARGE_CC, t, np.full_like(t, i_chg), 3.6 + 0.6 * np.sqrt(t / t_cc)))
    t0 = t_cc + 2.0
    t = t0 + np.linspace(0.0, 1800.0, 6)
    cur = i_chg * np.exp(-np.linspace(0.0, np.log(spec.charge_rate / 0.05), 6))
    steps.append(Step(StepKind.CHARGE_CV, t, cur, np.full_like(t, V_MAX)))

    t0 = t[-1] + REST_DT
    rest = relaxation_curve(spec, soh, "charge", rng, n)
    steps.append(Step(StepKind.REST_AFTER_CHARGE, t0 + rest.time, np.zeros(len(rest)), rest.voltage))

    # constant current for one hour at q(n) A integrates to exactly q(n) Ah
    t0 = t0 + rest.time[-1] + REST_DT
    u = np.arange(0.0, 3600.0 + DISCHARGE_DT / 2, DISCHARGE_DT)
    frac = u / 3600.0
    v = 4.05 - 0.75 * frac - 0.65 * frac ** 8
    steps.append(Step(StepKind.DISCHARGE_CC, t0 + u, np.full_like(u, -q), v))

    t0 = t0 + u[-1] + REST_DT
    rest = relaxation_curve(spec, soh, "discharge", rng, n)
    steps.append(Step(StepKind.REST_AFTER_DISCHARGE, t0 + rest.time, np.zeros(len(rest)), rest.voltage))
    return CycleRecord(spec.cell_id, n, steps, charge_rate=spec.charge_rate)


def generate_records(spec: SynthCellSpec, seed: int = 0) -> list[CycleRecord]:
    rng = _cell_rng(spec, seed)
    return [_cycle(spec, n, float(q), rng) for n, q in enumerate(soh_trajectory(spec), start=1)]


def generate_fleet(specs: Sequence[SynthCellSpec], seed: int = 0) -> tuple[dict[str, str], str]:
    """Canonical CSV text per cell (keyed by file name) plus a JSON manifest."""
    if not specs:
        raise SpecError("empty fleet")
    ids = [s.cell_id for s in specs]
    dup = sorted({c for c in ids if ids.count(c) > 1})
    if dup:
        raise SpecError(f"duplicate cell_id(s): {dup}")
    files = {f"{s.cell_id}.csv": write_cycling_csv(generate_records(s, seed)) for s in specs}
    manifest = {
        "seed": seed,
        "cells": [{"file": f"{s.cell_id}.csv", **asdict(s)} for s in specs],
    }
    return files, json.dumps(manifest, indent=2) + "\n"


def default_fleet(cells: int = 12, cycles: int = 300, seed: int = 7,
                  noise_sigma: float = 0.002) -> list[SynthCellSpec]:
    """Cells cycled round-robin through 0.25C (linear fade), 0.5C and 1C
    (knee fades), with per-cell rate jitter drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    scale = 300.0 / cycles
    specs = []
    for k in range(cells):
        rate = (0.25, 0.5, 1.0)[k % 3]
        j = rng.uniform(0.9, 1.1, size=3)
        base = SynthCellSpec(cell_id=f"cell{k + 1:02d}", cycles=cycles, charge_rate=rate,
                             noise_sigma=noise_sigma, seed=int(rng.integers(2**31)))
        if rate == 0.25:
            spec = replace(base, linear_rate=j[0] * 0.2 / 300 * scale)
        elif rate == 0.5:
            spec = replace(base, fade_mode="knee", linear_rate=j[0] * 3.5e-4 * scale,
                           knee_cycle=int(j[1] * 0.6 * cycles), knee_quadratic=j[2] * 3e-6 * scale ** 2)
        else:
            spec = replace(base, fade_mode="knee", linear_rate=j[0] * 4e-4 * scale,
                           knee_cycle=int(j[1] * 0.5 * cycles), knee_quadratic=j[2] * 4e-6 * scale ** 2)
        specs.append(spec)
    return specs


def specs_from_manifest(text: str) -> list[SynthCellSpec]:
    doc = json.loads(text)
    return [SynthCellSpec(**{k: v for k, v in c.items() if k != "file"}) for c in doc["cells"]]
