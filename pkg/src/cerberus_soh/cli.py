"""Command-line entry point.

    cerberus-soh synth    --cells 12 --cycles 300 --seed 7 --out data/
    cerberus-soh ingest   --data data/ --out capacities.csv
    cerberus-soh train    --data data/ --split stratified --epochs 200 --seed 7 --out model.ckpt
    cerberus-soh evaluate --model model.ckpt --data data/ --report report.txt --plots plots/
    cerberus-soh estimate --model model.ckpt --data cell01.csv [--cycle N]
    cerberus-soh predict  --model model.ckpt --data cell01.csv --horizon 20

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric error.
Diagnostics go to stderr; set CERBERUS_SOH_LOG (DEBUG, INFO, WARNING, ERROR)
to change verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .battery_data import CycleRecord, build_cell_history, group_by_cell, read_cycling_files
from .errors import CerberusError, DataError, InputError, NumericError, UsageError
from .featurize import history_window, write_windows_csv
from .harness import SplitSpec, TrainConfig, config_echo, evaluate, prepare_dataset, train
from .model import (
    CerberusModel,
    FusionSchedule,
    ModelConfig,
    build_bundles,
    checkpoint_dumps,
    checkpoint_loads,
    fuse_estimates,
    head_outputs,
    predict_trajectory,
)
from .synthcell import default_fleet, generate_fleet

log = logging.getLogger("cerberus_soh")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "CERBERUS_SOH_LOG"
MANIFEST = "manifest.json"
SPLIT_MODES = {"stratified": "stratified_cells", "random": "random_windows"}


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad input, which collides with the data-error code
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config file


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


CONFIG_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "beta1": float, "beta2": float, "eps": float,
    "deterministic": _bool, "patience": _optional_int, "seed": int, "bucket_pool": int,
    "schedule.n0": float, "schedule.n_ramp": float, "schedule.w_min": float, "schedule.w_max": float,
    "model.gru_hidden": int, "model.lstm_hidden": int, "model.rnn_layers": int,
    "model.relax_mlp": _ints, "model.history_mlp": _ints,
    "split.train_fraction": float, "split.val_fraction": float, "nominal_capacity": float,
}


def parse_config(text: str, source: str = "config") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are an error."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def _build_train_config(cfg: dict, args: argparse.Namespace) -> tuple[TrainConfig, float, float]:
    top = {k: v for k, v in cfg.items() if "." not in k and k != "nominal_capacity"}
    schedule = FusionSchedule(**{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("schedule.")})
    model = ModelConfig(**{k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("model.")})
    for flag in ("epochs", "batch_size", "lr", "seed", "patience"):
        value = getattr(args, flag, None)
        if value is not None:
            top[flag] = value
    if args.nondeterministic:
        top["deterministic"] = False
    tc = TrainConfig(schedule=schedule, model=model, **top)
    return tc, cfg.get("split.train_fraction", 0.8), cfg.get("split.val_fraction", 0.1)


# ---------------------------------------------------------------------------
# paths


def _data_files(spec: str) -> list[Path]:
    path = Path(spec)
    if path.is_dir():
        files = sorted(p for p in path.glob("*.csv"))
        if not files:
            raise UsageError(f"{path}: no .csv files")
        return files
    if not path.is_file():
        raise UsageError(f"{path}: no such file or directory")
    return [path]


def _out_dir(spec: str) -> Path:
    path = Path(spec)
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path}: exists and is not a directory")
    return path


def _parent_ok(spec: str | None) -> None:
    if spec is None or spec == "-":
        return
    parent = Path(spec).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"{spec}: parent directory does not exist")


def _write(spec: str | None, text: str) -> None:
    if spec is None or spec == "-":
        sys.stdout.write(text)
    else:
        Path(spec).write_text(text)


def _load_model(spec: str) -> CerberusModel:
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"{path}: no such checkpoint")
    return checkpoint_loads(path.read_text())


def _one_cell(records: list[CycleRecord]) -> list[CycleRecord]:
    cells = group_by_cell(records)
    if len(cells) != 1:
        raise InputError(f"expected a single cell, got {sorted(cells)}")
    return next(iter(cells.values()))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args.out)
    if args.cells < 1 or args.cycles < 1:
        raise UsageError("--cells and --cycles must be >= 1")
    specs = default_fleet(cells=args.cells, cycles=args.cycles, seed=args.seed, noise_sigma=args.noise)
    files, manifest = generate_fleet(specs, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    (out / MANIFEST).write_text(manifest)
    log.info("wrote %d cell files and %s to %s", len(files), MANIFEST, out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    files = _data_files(args.data)
    _parent_ok(args.out)
    _parent_ok(args.windows)
    if args.windows and not args.model:
        raise UsageError("--windows needs --model for the normalization statistics")
    model = _load_model(args.model) if args.model else None
    records = read_cycling_files(files, nominal_capacity=args.nominal)
    lines = ["cell_id,cycle_index,charge_rate,capacity_ah"]
    cells = group_by_cell(records)
    for cid, recs in sorted(cells.items()):
        hist = build_cell_history(recs)
        lines += [f"{cid},{n},{float(hist.charge_rate)!r},{q!r}" for n, q in hist.pairs]
    _write(args.out, "\n".join(lines) + "\n")
    if args.windows:
        windows = [w for recs in cells.values() for b in build_bundles(recs, model.normalizer)
                   for w in (*b.charge_windows, *b.discharge_windows)]
        Path(args.windows).write_text(write_windows_csv(windows))
    log.info("ingested %d cycles from %d cell(s)", len(records), len(cells))
    return EXIT_OK


def cmd_train(args) -> int:
    files = _data_files(args.data)
    _parent_ok(args.out)
    cfg = parse_config(Path(args.config).read_text(), args.config) if args.config else {}
    tc, train_fraction, val_fraction = _build_train_config(cfg, args)
    split = SplitSpec(SPLIT_MODES[args.split], train_fraction, tc.seed)
    nominal = cfg.get("nominal_capacity", args.nominal)

    records = read_cycling_files(files, nominal_capacity=nominal)
    ds = prepare_dataset(records, split, nominal, val_fraction=val_fraction)
    log.info("train %d, val %d, test %d cycles", len(ds.train), len(ds.val), len(ds.test))
    model, history = train(ds.train, ds.val, tc, ds.normalizer)
    Path(args.out).write_text(checkpoint_dumps(model))
    loss_path = args.loss_history or f"{args.out}.loss.csv"
    _parent_ok(loss_path)
    Path(loss_path).write_text(history.to_csv())
    if args.report:
        report = evaluate(model, ds.test, config_echo(tc, split))
        Path(args.report).write_text(report.to_text())
    log.info("best epoch %d; checkpoint %s", history.best_epoch, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    files = _data_files(args.data)
    _parent_ok(args.report)
    plots = _out_dir(args.plots) if args.plots else None
    model = _load_model(args.model)
    records = read_cycling_files(files, nominal_capacity=args.nominal)
    if args.split == "none":
        bundles = [b for recs in group_by_cell(records).values() for b in build_bundles(recs, model.normalizer)]
        echo = {"split": "none"}
    else:
        split = SplitSpec(SPLIT_MODES[args.split], args.train_fraction, args.seed)
        ds = prepare_dataset(records, split, args.nominal)
        # rebuild the held-out side with the checkpoint's own statistics
        test_ids = {(b.cell_id, b.cycle_index) for b in ds.test}
        bundles = [b for recs in group_by_cell(records).values()
                   for b in build_bundles(recs, model.normalizer) if (b.cell_id, b.cycle_index) in test_ids]
        echo = {f"split.{k}": v for k, v in dataclasses.asdict(split).items()}
    report = evaluate(model, bundles, echo)
    _write(args.report, report.to_text())
    if plots is not None:
        plots.mkdir(parents=True, exist_ok=True)
        for cid in report.cell_mape:
            (plots / f"{cid}.csv").write_text(report.rows_csv(cid))
    return EXIT_OK


def cmd_estimate(args) -> int:
    files = _data_files(args.data)
    model = _load_model(args.model)
    recs = _one_cell(read_cycling_files(files, nominal_capacity=args.nominal))
    target = recs[-1] if args.cycle is None else next((r for r in recs if r.cycle_index == args.cycle), None)
    if target is None:
        raise InputError(f"cycle {args.cycle} not in {args.data}")
    earlier = [r for r in recs if r.cycle_index < target.cycle_index]
    bundles = build_bundles([target], model.normalizer, with_labels=False, history_records=earlier)
    est = fuse_estimates(model, bundles)[0]
    heads = head_outputs(model, bundles)[0] * model.normalizer.capacity_scale
    cells = ",".join("" if np.isnan(v) else f"{v:.6f}" for v in heads)
    sys.stdout.write("cell_id,cycle_index,fused_ah,head_a_ah,head_b_ah,head_c_ah\n")
    sys.stdout.write(f"{target.cell_id},{target.cycle_index},{est:.6f},{cells}\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    files = _data_files(args.data)
    _parent_ok(args.out)
    model = _load_model(args.model)
    recs = _one_cell(read_cycling_files(files, nominal_capacity=args.nominal))
    if args.from_cycle is not None:
        recs = [r for r in recs if r.cycle_index <= args.from_cycle]
        if not recs:
            raise InputError(f"no cycles at or before {args.from_cycle}")
    hist = build_cell_history(recs)
    window = history_window(hist.capacities, hist.cell_id, int(hist.cycles[-1]), model.normalizer)
    traj = predict_trajectory(model, window, args.horizon)
    lines = ["cycle_index,predicted_ah"]
    lines += [f"{int(hist.cycles[-1]) + k},{q:.6f}" for k, q in enumerate(traj, start=1)]
    _write(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cerberus-soh", description="Battery capacity estimation from relaxation voltage.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, model=True):
        p.add_argument("--data", required=True, help="cycling CSV file or directory of them")
        p.add_argument("--nominal", type=float, default=3.5, help="nominal capacity in Ah")
        if model:
            p.add_argument("--model", required=True, help="checkpoint path")

    p = sub.add_parser("synth", help="generate a synthetic fleet")
    p.add_argument("--cells", type=int, default=12)
    p.add_argument("--cycles", type=int, default=300)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise", type=float, default=0.002, help="voltage noise sigma in V")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate cycling CSVs and emit coulomb-counted capacities")
    common(p, model=False)
    p.add_argument("--out", help="capacity CSV (default stdout)")
    p.add_argument("--windows", help="also write normalized relaxation windows here")
    p.add_argument("--model", help="checkpoint supplying the normalization for --windows")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model")
    common(p, model=False)
    p.add_argument("--split", choices=sorted(SPLIT_MODES), default="stratified")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="key = value overrides")
    p.add_argument("--nondeterministic", action="store_true", help="seed the shuffle from the OS")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-history", help="loss CSV (default <out>.loss.csv)")
    p.add_argument("--report", help="also evaluate on the held-out split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    common(p)
    p.add_argument("--split", choices=["none", *sorted(SPLIT_MODES)], default="none",
                   help="'none' scores every cycle; otherwise only the held-out side")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.8)
    p.add_argument("--report", help="report path (default stdout)")
    p.add_argument("--plots", help="directory for per-cell plot CSVs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("estimate", help="fused capacity for one cycle")
    common(p)
    p.add_argument("--cycle", type=int, help="cycle to estimate (default: last in file)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("predict", help="roll the history head forward")
    common(p)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--from-cycle", dest="from_cycle", type=int, help="last observed cycle (default: last in file)")
    p.add_argument("--out", help="trajectory CSV (default stdout)")
    p.set_defaults(func=cmd_predict)
    return parser


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        level = "WARNING"
    root = logging.getLogger("cerberus_soh")
    if not root.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
    root.setLevel(level)


def run(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CerberusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
