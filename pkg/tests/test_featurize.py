from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cerberus_soh.battery_data import CellHistory, RelaxationCurve
from cerberus_soh.errors import DataError, DegenerateDataError, ResamplingError
from cerberus_soh.featurize import (
    WINDOW_SIZE,
    Normalizer,
    downsample,
    expand_history,
    fit_normalizer,
    linear_extrapolate_history,
    slide_windows,
    write_windows_csv,
)


def curve(kind="charge", n=31, dt=60.0, v=None, cycle=1):
    t = np.arange(n) * dt
    v = np.linspace(4.2, 4.1, n) if v is None else np.asarray(v, dtype=float)
    return RelaxationCurve("c1", cycle, kind, t, v, dt)


def test_downsample_31_to_16():
    out = downsample(curve(), 120.0)
    assert len(out) == 16
    np.testing.assert_array_equal(out.time, np.arange(16) * 120.0)
    assert out.native_interval == 120.0


def test_downsample_identity_and_bad_ratio():
    c = curve(dt=120.0, n=16)
    assert downsample(c, 120.0) is c
    with pytest.raises(ResamplingError):
        downsample(curve(), 90.0)


def test_normalizer_two_point_stats_and_independence():
    norm = fit_normalizer([curve("charge", 2, v=[4.0, 4.2]), curve("discharge", 2, v=[3.0, 3.4])], 3.5)
    assert norm.mean_charge == pytest.approx(4.1)
    assert norm.std_charge == pytest.approx(0.1)
    assert norm.mean_discharge == pytest.approx(3.2)
    assert norm.std_discharge == pytest.approx(0.2)
    with pytest.raises(DegenerateDataError):
        fit_normalizer([curve("charge", 3, v=[4.1] * 3), curve("discharge", 2, v=[3.0, 3.4])], 3.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_zscored_training_pool_is_standard(seed, n_curves):
    rng = np.random.default_rng(seed)
    pool = [curve(k, 16, 120.0, v=rng.normal(4.0 if k == "charge" else 3.2, 0.05, 16))
            for k in ("charge", "discharge") for _ in range(n_curves)]
    norm = fit_normalizer(pool, 3.5)
    for kind in ("charge", "discharge"):
        z = np.concatenate([norm.zscore(c.voltage, kind) for c in pool if c.kind == kind])
        assert abs(z.mean()) < 1e-9
        assert abs(z.std() - 1) < 1e-9


@pytest.mark.parametrize("length, size, expected", [(15, 10, 6), (10, 10, 1), (9, 10, 0)])
def test_window_counts(length, size, expected):
    windows = slide_windows(curve(n=length, dt=120.0), size, 3.5, Normalizer(4.1, 0.05, 3.2, 0.1, 3.5))
    assert len(windows) == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.sampled_from(["charge", "discharge"]))
def test_window_law_and_inverse_roundtrip(length, kind):
    norm = Normalizer(4.1, 0.05, 3.2, 0.1, 3.5)
    c = curve(kind, length, 120.0, v=np.linspace(3.0, 4.2, length))
    size = WINDOW_SIZE[kind]
    windows = slide_windows(c, size, 3.0, norm)
    assert len(windows) == max(0, length - size + 1)
    for start, w in enumerate(windows):
        np.testing.assert_allclose(norm.unzscore(w.values, kind), c.voltage[start: start + size], atol=1e-12)
        assert w.label == pytest.approx(3.0 / 3.5)


def test_windows_need_120s_curves():
    with pytest.raises(ResamplingError):
        slide_windows(curve(), 10, 3.5, Normalizer(4.1, 0.05, 3.2, 0.1, 3.5))


def test_extrapolation_examples():
    y = np.linspace(1.0, 0.9, 12)
    np.testing.assert_array_equal(linear_extrapolate_history(y), y)
    assert linear_extrapolate_history([3.5] * 4).tolist() == [3.5] * 10
    line = 3.46 + 0.01 * np.arange(4, -1, -1)  # 3.50 ... 3.46
    out = linear_extrapolate_history(line)
    np.testing.assert_allclose(out, 3.46 + 0.01 * np.arange(9, -1, -1), atol=1e-12)
    assert out[:5] == pytest.approx([3.55, 3.54, 3.53, 3.52, 3.51])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.5, 1.2), min_size=1, max_size=25))
def test_extrapolation_is_idempotent(caps):
    once = linear_extrapolate_history(caps)
    assert len(once) == max(10, len(caps))
    np.testing.assert_array_equal(once[-len(caps):], caps)
    np.testing.assert_array_equal(linear_extrapolate_history(once), once)


def _hist(n):
    return CellHistory("c1", 0.5, np.arange(1, n + 1), 3.5 - 0.01 * np.arange(n))


def test_expand_history_twelve_cycles(unit_norm):
    windows = expand_history(_hist(12), unit_norm)
    assert len(windows) == 11
    assert [len(w) for w in windows] == [10] * 10 + [11]
    assert [w.end_cycle for w in windows] == list(range(1, 12))
    for prev, cur in zip(windows, windows[1:]):
        real_prev = prev.values[-prev.n_real:]
        np.testing.assert_array_equal(cur.values[-cur.n_real:][: prev.n_real], real_prev)
        assert cur.values[-cur.n_real] == windows[0].values[-1]  # same first real cycle


def test_expand_history_two_and_one(unit_norm):
    (w,) = expand_history(_hist(2), unit_norm)
    # the target cycle never appears in its own input: 9 extrapolated + cycle 1
    assert len(w) == 10 and w.n_real == 1 and w.end_cycle == 1
    np.testing.assert_array_equal(w.values, np.ones(10))
    assert w.target == pytest.approx(3.49 / 3.5)
    with pytest.raises(DataError):
        expand_history(_hist(1), unit_norm)


def test_windows_csv_layout():
    norm = Normalizer(4.1, 0.05, 3.2, 0.1, 3.5)
    ws = slide_windows(curve(n=10, dt=120.0), 10, 3.5, norm)
    ws += slide_windows(curve("discharge", 15, 120.0), 15, None, norm)
    lines = write_windows_csv(ws).splitlines()
    assert lines[0] == "kind,cell_id,cycle_index,label," + ",".join(f"v{i}" for i in range(15))
    assert lines[1].startswith("charge,c1,1,1.0,") and lines[1].endswith(",,,,,")
    assert lines[2].startswith("discharge,c1,1,,")
