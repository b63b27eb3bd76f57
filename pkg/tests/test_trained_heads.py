"""Accuracy of individual heads after short training runs on clean data."""

from __future__ import annotations

import numpy as np
import pytest

from cerberus_soh.featurize import history_window
from cerberus_soh.harness import SplitSpec, TrainConfig, prepare_dataset, train
from cerberus_soh.model import ModelConfig, head_a_forward, head_b_forward, head_c_forward
from cerberus_soh.synthcell import SynthCellSpec, default_fleet, generate_records

pytestmark = pytest.mark.slow


def test_history_head_holds_constant_capacity():
    specs = [SynthCellSpec(f"flat{k}", cycles=60, linear_rate=0.0, charge_rate=(0.25, 0.5)[k % 2], seed=k)
             for k in range(6)]
    records = [r for s in specs for r in generate_records(s, seed=0)]
    ds = prepare_dataset(records, SplitSpec(seed=0, train_fraction=0.5))
    cfg = TrainConfig(epochs=30, batch_size=8, lr=3e-3, seed=0, model=ModelConfig(gru_hidden=8, lstm_hidden=8))
    model, _ = train(ds.train, ds.val, cfg, ds.normalizer)
    pred = head_c_forward(model, history_window([3.5] * 10, "flat", 10, model.normalizer))
    assert abs(pred - 1.0) < 0.01


def test_relaxation_heads_per_window_error_on_clean_fleet():
    specs = default_fleet(cells=12, cycles=100, seed=5, noise_sigma=0.0)
    records = [r for s in specs for r in generate_records(s, seed=5)]
    ds = prepare_dataset(records, SplitSpec(seed=5))
    cfg = TrainConfig(epochs=20, batch_size=16, lr=3e-3, seed=5, model=ModelConfig(gru_hidden=16, lstm_hidden=8))
    model, _ = train(ds.train, ds.val, cfg, ds.normalizer)

    # judge interpolation only: held-out cycles whose capacity lies inside the trained range
    seen = [b.label for b in ds.train]
    inside = [b for b in ds.test if min(seen) <= b.label <= max(seen)]
    assert len(inside) > 0.9 * len(ds.test)
    err_a = [abs(head_a_forward(model, w) - w.label) for b in inside for w in b.charge_windows]
    err_b = [abs(head_b_forward(model, w) - w.label) for b in inside for w in b.discharge_windows]
    # labels are fractions of nominal, so 0.02 is 2% of nominal capacity
    assert max(err_a) < 0.02, np.max(err_a)
    assert max(err_b) < 0.02, np.max(err_b)
