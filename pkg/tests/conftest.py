from __future__ import annotations

import numpy as np
import pytest

from cerberus_soh.battery_data import CycleRecord, Step, StepKind
from cerberus_soh.featurize import Normalizer
from cerberus_soh.synthcell import SynthCellSpec, generate_records


def make_step(kind: StepKind, n: int, dt: float = 60.0, current: float = 0.0, v0: float = 4.1) -> Step:
    t = np.arange(n) * dt
    return Step(kind, t, np.full(n, current), v0 - 0.001 * np.arange(n))


def make_cycle(cell="c1", n=1, capacity=3.5, rate=0.5, rests=(31, 31)) -> CycleRecord:
    steps = [make_step(StepKind.CHARGE_CC, 5, current=rate * 3.5, v0=3.8)]
    if rests[0]:
        steps.append(make_step(StepKind.REST_AFTER_CHARGE, rests[0], v0=4.15))
    u = np.arange(0.0, 3601.0, 2.0)
    steps.append(Step(StepKind.DISCHARGE_CC, u, np.full_like(u, -capacity), np.linspace(4.0, 2.7, len(u))))
    if rests[1]:
        steps.append(make_step(StepKind.REST_AFTER_DISCHARGE, rests[1], v0=3.1))
    return CycleRecord(cell, n, steps, charge_rate=rate)


@pytest.fixture
def unit_norm() -> Normalizer:
    return Normalizer(0.0, 1.0, 0.0, 1.0, 3.5)


@pytest.fixture(scope="session")
def small_cell() -> list[CycleRecord]:
    spec = SynthCellSpec("s1", cycles=24, linear_rate=0.2 / 24, noise_sigma=0.0)
    return generate_records(spec, seed=1)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool | None, detail: str) -> None:
    """``ok=None`` marks a criterion that was not exercised."""
    verdict = "SKIP" if ok is None else "PASS" if ok else "FAIL"
    ACCEPTANCE[criterion] = f"{criterion} {verdict}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
