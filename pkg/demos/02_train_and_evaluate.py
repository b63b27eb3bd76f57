"""Train a reduced model on a small fleet and read the evaluation report.

Hidden sizes and cycle counts are cut down so this finishes in under half a
minute on one core; the acceptance run in tests/ uses the full settings.
"""

from __future__ import annotations

import logging

from cerberus_soh.harness import SplitSpec, TrainConfig, config_echo, evaluate, prepare_dataset, train
from cerberus_soh.model import ModelConfig
from cerberus_soh.synthcell import default_fleet, generate_records

logging.basicConfig(level=logging.INFO, format="%(message)s")

specs = default_fleet(cells=6, cycles=80, seed=3)
records = [r for s in specs for r in generate_records(s, seed=3)]

split = SplitSpec("stratified_cells", train_fraction=0.7, seed=3)
ds = prepare_dataset(records, split)
print(f"train {len(ds.train)} / val {len(ds.val)} / test {len(ds.test)} cycles")

config = TrainConfig(epochs=40, batch_size=16, lr=3e-3, seed=3,
                     model=ModelConfig(gru_hidden=16, lstm_hidden=12))
model, history = train(ds.train, ds.val, config, ds.normalizer)
print(f"best epoch {history.best_epoch} of {len(history)}")

report = evaluate(model, ds.test, config_echo(config, split))
print(report.to_text())

# the per-cycle table is what a plot of estimate vs truth would be drawn from
cell = next(iter(report.cell_mape))
print("\n".join(report.rows_csv(cell).splitlines()[:6]))
