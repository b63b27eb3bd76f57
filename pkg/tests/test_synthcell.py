from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cerberus_soh.battery_data import build_cell_history, group_by_cell, parse_cycling_csv
from cerberus_soh.errors import InputError, SpecError
from cerberus_soh.harness import SplitSpec, split_stratified
from cerberus_soh.synthcell import (
    SynthCellSpec,
    capacity_at,
    default_fleet,
    generate_fleet,
    relaxation_curve,
    soh_trajectory,
    specs_from_manifest,
)

CLEAN = SynthCellSpec("x", noise_sigma=0.0)


def test_linear_midpoint_and_origin():
    spec = SynthCellSpec("x", linear_rate=0.2 / 300)
    assert float(capacity_at(spec, 150)) == pytest.approx(3.15, abs=1e-12)
    assert float(capacity_at(spec, 300)) == pytest.approx(0.8 * 3.5, abs=1e-12)
    assert float(capacity_at(spec, 0)) == 3.5
    assert len(soh_trajectory(spec)) == 300


def test_knee_beyond_range_is_linear():
    lin = SynthCellSpec("x", cycles=100)
    knee = SynthCellSpec("x", cycles=100, fade_mode="knee", knee_cycle=500, knee_quadratic=1e-3)
    np.testing.assert_array_equal(soh_trajectory(knee), soh_trajectory(lin))
    bent = SynthCellSpec("x", cycles=100, fade_mode="knee", knee_cycle=50, knee_quadratic=1e-5)
    assert soh_trajectory(bent)[-1] < soh_trajectory(lin)[-1]


def test_trajectory_clips_at_half_nominal(caplog):
    spec = SynthCellSpec("x", cycles=10, linear_rate=0.2)
    assert soh_trajectory(spec).min() == 1.75
    assert "clipped" in caplog.text


def test_relaxation_limits():
    assert relaxation_curve(CLEAN, 1.0, "charge").voltage[0] == 4.2
    slow = SynthCellSpec("x", noise_sigma=0.0, relax_tau_charge=1e-3, relax_tau_discharge=1e-3)
    assert relaxation_curve(slow, 1.0, "charge").voltage[-1] == pytest.approx(4.08, abs=1e-12)
    assert relaxation_curve(slow, 0.8, "charge").voltage[-1] == pytest.approx(4.04, abs=1e-12)
    c = relaxation_curve(CLEAN, 0.9, "discharge")
    assert len(c) == 31 and c.native_interval == 60.0
    with pytest.raises(InputError):
        relaxation_curve(CLEAN, 1.3, "charge")


@settings(max_examples=40, deadline=None)
@given(st.floats(0.5, 1.0), st.floats(0.5, 1.0))
def test_noise_free_curves_monotone_in_time_and_soh(s1, s2):
    lo, hi = sorted((s1, s2))
    for kind, sign in (("charge", -1), ("discharge", 1)):
        a = relaxation_curve(CLEAN, lo, kind).voltage
        b = relaxation_curve(CLEAN, hi, kind).voltage
        assert np.all(sign * np.diff(a) > 0)
        if hi > lo:
            # faded cells sit lower after charge and higher after discharge
            assert np.all(sign * (a[1:] - b[1:]) > 0)


def test_fleet_roundtrip_recovers_trajectory():
    spec = SynthCellSpec("rt", cycles=3, linear_rate=0.01)
    files, manifest = generate_fleet([spec], seed=5)
    recs = parse_cycling_csv(files["rt.csv"])
    assert len(recs) == 3
    hist = build_cell_history(recs)
    np.testing.assert_allclose(hist.capacities, soh_trajectory(spec), rtol=2e-3)
    assert specs_from_manifest(manifest) == [spec]
    assert json.loads(manifest)["seed"] == 5


def test_fleet_is_byte_deterministic():
    specs = default_fleet(cells=3, cycles=4, seed=1)
    assert generate_fleet(specs, seed=2) == generate_fleet(specs, seed=2)
    assert generate_fleet(specs, seed=2) != generate_fleet(specs, seed=3)


def test_default_fleet_has_three_strata():
    specs = default_fleet(cells=12, cycles=6)
    files, _ = generate_fleet(specs, seed=7)
    recs = [r for text in files.values() for r in parse_cycling_csv(text)]
    hists = [build_cell_history(rs) for rs in group_by_cell(recs).values()]
    assert sorted({h.charge_rate for h in hists}) == [0.25, 0.5, 1.0]
    tr, te = split_stratified(hists, SplitSpec(seed=0))
    assert len(tr) == 9 and len(te) == 3


def test_spec_validation():
    with pytest.raises(SpecError):
        generate_fleet([SynthCellSpec("a"), SynthCellSpec("a")])
    with pytest.raises(SpecError):
        SynthCellSpec("a", fade_mode="cliff")
    with pytest.raises(SpecError):
        generate_fleet([])
