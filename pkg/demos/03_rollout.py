"""Estimate now, then roll the history head forward.

Trains a small model on linear-fade cells, then, for a held-out cell,
compares a 20-cycle recursive forecast from mid-life with the generator's
analytic trajectory.
"""

from __future__ import annotations

import numpy as np

from cerberus_soh.battery_data import build_cell_history
from cerberus_soh.featurize import history_window
from cerberus_soh.harness import SplitSpec, TrainConfig, mape, prepare_dataset, train
from cerberus_soh.model import ModelConfig, build_bundles, fuse_estimate, predict_trajectory
from cerberus_soh.synthcell import SynthCellSpec, capacity_at, generate_records

rng = np.random.default_rng(11)
specs = [SynthCellSpec(f"lin{k}", cycles=80, linear_rate=rng.uniform(0.15, 0.25) / 80,
                       charge_rate=0.25 if k % 2 else 0.5, seed=k) for k in range(6)]
records = {s.cell_id: generate_records(s, seed=11) for s in specs}
flat = [r for recs in records.values() for r in recs]

ds = prepare_dataset(flat, SplitSpec(seed=11, train_fraction=0.6))
cfg = TrainConfig(epochs=8, batch_size=32, lr=3e-3, seed=11, model=ModelConfig(gru_hidden=16, lstm_hidden=12))
model, _ = train(ds.train, ds.val, cfg, ds.normalizer)

held_out = sorted({b.cell_id for b in ds.test})[0]
spec = next(s for s in specs if s.cell_id == held_out)
cell = records[held_out]

start = 40
current = build_bundles(cell[start - 1: start], model.normalizer, history_records=cell[: start - 1])[0]
print(f"{held_out}: fused estimate at cycle {start} = {fuse_estimate(model, current):.4f} Ah "
      f"(truth {capacity_at(spec, start):.4f} Ah)")

caps = build_cell_history(cell[:start]).capacities
forecast = predict_trajectory(model, history_window(caps, held_out, start, model.normalizer), horizon=20)
truth = capacity_at(spec, np.arange(start + 1, start + 21))
for k in (0, 4, 9, 19):
    print(f"  cycle {start + k + 1}: forecast {forecast[k]:.4f} Ah, truth {truth[k]:.4f} Ah")
print(f"  20-cycle MAPE {mape(forecast, truth):.3f}%")
