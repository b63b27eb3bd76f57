"""Dataset splitting, training, evaluation metrics and reports."""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, TypeVar

import numpy as np

from .battery_data import (
    NOMINAL_CAPACITY_AH,
    CellHistory,
    CycleRecord,
    build_cell_history,
    extract_relaxation,
    group_by_cell,
)
from .errors import DataError, DivergenceError, InputError, MetricError, MissingStepError, StratificationError
from .featurize import WINDOW_INTERVAL_S, Normalizer, downsample, fit_normalizer
from .model import (
    CerberusModel,
    CycleBundle,
    FusionSchedule,
    ModelConfig,
    blend,
    build_bundles,
    bundle_weights,
    head_outputs,
    total_loss,
)
from .neural import Adam

log = logging.getLogger(__name__)

T = TypeVar("T")
DIVERGENCE_LIMIT = 1e6


def round_half_up(x: float) -> int:
    """round() with halves away from zero (Python's round() is banker's)."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "stratified_cells"  # or "random_windows"
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("random_windows", "stratified_cells"):
            raise InputError(f"unknown split mode {self.mode!r}")
        if not 0 < self.train_fraction < 1:
            raise InputError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


def _n_train(n: int, fraction: float) -> int:
    # both sides keep at least one item
    return min(max(round_half_up(fraction * n), 1), n - 1)


def split_random(items: Sequence[T], spec: SplitSpec) -> tuple[list[T], list[T]]:
    """Seeded uniform shuffle; the first round(fraction * N) go to train."""
    if len(items) < 2:
        raise DataError(f"random split needs at least 2 items, got {len(items)}")
    perm = np.random.default_rng(spec.seed).permutation(len(items))
    k = _n_train(len(items), spec.train_fraction)
    return [items[i] for i in perm[:k]], [items[i] for i in perm[k:]]


def condition_label(rate: float) -> str:
    return f"{rate:g}C"


def split_stratified(cells: Sequence[CellHistory], spec: SplitSpec) -> tuple[list[CellHistory], list[CellHistory]]:
    """Per charge-rate stratum, shuffle cells and send round(fraction * k) to train."""
    strata: dict[float, list[CellHistory]] = {}
    for c in cells:
        strata.setdefault(c.charge_rate, []).append(c)
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for rate in sorted(strata):
        group = sorted(strata[rate], key=lambda c: c.cell_id)
        if len(group) < 2:
            raise StratificationError(f"stratum {condition_label(rate)} has {len(group)} cell(s); need >= 2")
        perm = rng.permutation(len(group))
        k = _n_train(len(group), spec.train_fraction)
        train.extend(group[i] for i in perm[:k])
        test.extend(group[i] for i in perm[k:])
    return train, test


def mape(pred: Sequence[float], truth: Sequence[float]) -> float:
    """Mean absolute percentage error in percent."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size == 0:
        raise MetricError(f"MAPE needs equal non-empty inputs, got {pred.shape} and {truth.shape}")
    if np.any(truth <= 0):
        raise MetricError("MAPE undefined for non-positive truth values")
    return float(100.0 * np.mean(np.abs(pred - truth) / truth))


# ---------------------------------------------------------------------------
# dataset assembly


@dataclass
class Dataset:
    normalizer: Normalizer
    train: list[CycleBundle]
    val: list[CycleBundle]
    test: list[CycleBundle]


def _training_curves(records: Sequence[CycleRecord]):
    for rec in records:
        for kind in ("charge", "discharge"):
            try:
                yield downsample(extract_relaxation(rec, kind), WINDOW_INTERVAL_S)
            except MissingStepError:
                continue


def prepare_dataset(records: Sequence[CycleRecord], split: SplitSpec,
                    nominal_capacity: float = NOMINAL_CAPACITY_AH, val_fraction: float = 0.1) -> Dataset:
    """Split, fit the normalizer on the training side only, and bundle cycles.

    Validation bundles are a seeded ``val_fraction`` carved from the
    training side.
    """
    by_cell = group_by_cell(records)
    if split.mode == "stratified_cells":
        histories = [build_cell_history(recs) for recs in by_cell.values()]
        train_cells, _ = split_stratified(histories, split)
        train_ids = {c.cell_id for c in train_cells}
        train_records = [r for cid in sorted(train_ids) for r in by_cell[cid]]
        is_train = lambda b: b.cell_id in train_ids  # noqa: E731
    else:
        cycles = [(r.cell_id, r.cycle_index) for recs in by_cell.values() for r in recs]
        train_keys, _ = split_random(cycles, split)
        train_set = set(train_keys)
        train_records = [r for recs in by_cell.values() for r in recs if (r.cell_id, r.cycle_index) in train_set]
        is_train = lambda b: (b.cell_id, b.cycle_index) in train_set  # noqa: E731

    norm = fit_normalizer(_training_curves(train_records), nominal_capacity)
    bundles = [b for cid in sorted(by_cell) for b in build_bundles(by_cell[cid], norm)]
    train = [b for b in bundles if is_train(b)]
    test = [b for b in bundles if not is_train(b)]
    val: list[CycleBundle] = []
    if val_fraction > 0 and len(train) >= 2:
        perm = np.random.default_rng([split.seed, 1]).permutation(len(train))
        n_val = max(1, round_half_up(val_fraction * len(train)))
        val_idx = set(perm[:n_val].tolist())
        val = [b for i, b in enumerate(train) if i in val_idx]
        train = [b for i, b in enumerate(train) if i not in val_idx]
    return Dataset(norm, train, val, test)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    deterministic: bool = True
    schedule: FusionSchedule = field(default_factory=FusionSchedule)
    model: ModelConfig = field(default_factory=ModelConfig)
    patience: int | None = None  # epochs without val improvement before stopping
    seed: int = 0
    bucket_pool: int = 8  # batches per length-sorting pool; 1 disables bucketing

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")


@dataclass
class LossHistory:
    epochs: list[int] = field(default_factory=list)
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.epochs)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("epoch,train_loss,val_loss\n")
        for e, tr, va in zip(self.epochs, self.train, self.val):
            out.write(f"{e},{tr!r},{'' if math.isnan(va) else repr(va)}\n")
        return out.getvalue()


def _batched_loss(model: CerberusModel, bundles: Sequence[CycleBundle], size: int = 256) -> float:
    total = 0.0
    for s in range(0, len(bundles), size):
        chunk = bundles[s: s + size]
        total += total_loss(model, chunk).item() * len(chunk)
    return total / len(bundles)


def _epoch_batches(rng: np.random.Generator, lengths: np.ndarray, batch_size: int, pool: int) -> list[np.ndarray]:
    """Shuffled batches whose members have similar history lengths.

    The shuffled index stream is cut into pools of ``pool`` batches, each pool
    is sorted by history length before batching, and the batch order is
    shuffled again. This bounds the padding the history head has to run over.
    """
    perm = rng.permutation(len(lengths))
    batches = []
    span = batch_size * max(pool, 1)
    for s in range(0, len(perm), span):
        chunk = perm[s: s + span]
        if pool > 1:
            chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[k: k + batch_size] for k in range(0, len(chunk), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(train_set: Sequence[CycleBundle], val_set: Sequence[CycleBundle], config: TrainConfig,
          normalizer: Normalizer, model: CerberusModel | None = None) -> tuple[CerberusModel, LossHistory]:
    """Mini-batch Adam on the weighted three-head loss.

    Returns the parameters from the epoch with the lowest validation loss
    (training loss when ``val_set`` is empty).
    """
    if not train_set:
        raise DataError("empty training set")
    if model is None:
        model = CerberusModel.init(normalizer, config.model, config.schedule, seed=config.seed)
    params = model.parameters()
    opt = Adam(config.lr, config.beta1, config.beta2, config.eps)
    history = LossHistory()
    best = math.inf
    best_state = {k: p.data.copy() for k, p in params.items()}
    stale = 0
    # with deterministic off the shuffle seed still varies per run
    rng = np.random.default_rng(config.seed if config.deterministic else None)

    lengths = np.array([b.history_length for b in train_set])
    for epoch in range(1, config.epochs + 1):
        running, seen = 0.0, 0
        for idx in _epoch_batches(rng, lengths, config.batch_size, config.bucket_pool):
            batch = [train_set[i] for i in idx]
            for p in params.values():
                p.zero_grad()
            loss = total_loss(model, batch)
            value = loss.item()
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise DivergenceError(f"training loss {value}", epoch=epoch)
            loss.backward()
            opt.step(params, {k: p.grad for k, p in params.items()})
            running += value * len(batch)
            seen += len(batch)
        train_loss = running / seen
        val_loss = _batched_loss(model, val_set) if val_set else math.nan
        if val_set and not math.isfinite(val_loss):
            raise DivergenceError(f"validation loss {val_loss}", epoch=epoch)
        history.epochs.append(epoch)
        history.train.append(train_loss)
        history.val.append(val_loss)
        score = val_loss if val_set else train_loss
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if score < best:
            best, stale = score, 0
            history.best_epoch = epoch
            best_state = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break

    for k, p in params.items():
        p.data[...] = best_state[k]
        p.zero_grad()
    return model, history


# ---------------------------------------------------------------------------
# evaluation


FORCED = {"a": (1.0, 0.0, 0.0), "b": (0.0, 1.0, 0.0), "c": (0.0, 0.0, 1.0)}


@dataclass
class EvalReport:
    overall_mape: float
    condition_mape: dict[str, float]
    cell_mape: dict[str, float]
    head_mape: dict[str, float]  # head-only ablations over bundles that have the head
    condition_head_mape: dict[str, dict[str, float]]
    n_cycles: int
    n_windows: dict[str, int]
    rows: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_text(self) -> str:
        out = io.StringIO()
        out.write("# cerberus-soh evaluation report\n")
        out.write(f"overall_mape_pct = {self.overall_mape:.6f}\n")
        out.write(f"cycles = {self.n_cycles}\n")
        for kind, n in self.n_windows.items():
            out.write(f"windows_{kind} = {n}\n")
        for head, v in self.head_mape.items():
            out.write(f"head_{head}_only_mape_pct = {v:.6f}\n")
        for key, value in sorted(self.config.items()):
            out.write(f"config.{key} = {value}\n")
        out.write("\n[conditions]\ncondition,fused_mape_pct,head_a_mape_pct,head_b_mape_pct,head_c_mape_pct\n")
        for cond, v in self.condition_mape.items():
            heads = self.condition_head_mape.get(cond, {})
            cells = ",".join(f"{heads.get(h, math.nan):.6f}" for h in "abc")
            out.write(f"{cond},{v:.6f},{cells}\n")
        out.write("\n[cells]\ncell_id,fused_mape_pct\n")
        for cell, v in self.cell_mape.items():
            out.write(f"{cell},{v:.6f}\n")
        return out.getvalue()

    def rows_csv(self, cell_id: str | None = None) -> str:
        """Plot-ready per-cycle table; NaN heads are left empty."""
        out = io.StringIO()
        cols = ["cycle_index", "truth_ah", "fused_ah", "head_a_ah", "head_b_ah", "head_c_ah"]
        if cell_id is None:
            cols = ["cell_id"] + cols
        out.write(",".join(cols) + "\n")
        for r in self.rows:
            if cell_id is not None and r["cell_id"] != cell_id:
                continue
            out.write(",".join(_cell(r[c]) for c in cols) + "\n")
        return out.getvalue()


def _cell(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def evaluate(model: CerberusModel, bundles: Sequence[CycleBundle], config: dict | None = None) -> EvalReport:
    """Fused per-cycle MAPE overall, per charge-rate condition and per cell,
    plus head-only ablations that force the weights to one head."""
    if not bundles:
        raise DataError("empty evaluation set")
    if any(b.label is None for b in bundles):
        raise InputError("evaluation bundles need labels")
    scale = model.normalizer.capacity_scale
    outputs = head_outputs(model, bundles)
    fused = blend(outputs, bundle_weights(bundles, model.schedule)) * scale
    truth = np.array([b.label for b in bundles]) * scale
    est = outputs * scale
    conds = np.array([condition_label(b.charge_rate) for b in bundles])
    cells = np.array([b.cell_id for b in bundles])

    head_only = {}
    for h, tag in enumerate("abc"):
        head_only[tag] = blend(outputs, bundle_weights(bundles, model.schedule, force=FORCED[tag])) * scale

    def head_mapes(sel: np.ndarray) -> dict[str, float]:
        res = {}
        for h, tag in enumerate("abc"):
            has = sel & ~np.isnan(outputs[:, h])
            res[tag] = mape(head_only[tag][has], truth[has]) if has.any() else math.nan
        return res

    everything = np.ones(len(bundles), dtype=bool)
    order = sorted(set(conds), key=lambda c: float(c[:-1]))
    rows = [
        {"cell_id": b.cell_id, "cycle_index": b.cycle_index, "truth_ah": float(truth[j]),
         "fused_ah": float(fused[j]), "head_a_ah": float(est[j, 0]), "head_b_ah": float(est[j, 1]),
         "head_c_ah": float(est[j, 2])}
        for j, b in enumerate(bundles)
    ]
    return EvalReport(
        overall_mape=mape(fused, truth),
        condition_mape={c: mape(fused[conds == c], truth[conds == c]) for c in order},
        cell_mape={c: mape(fused[cells == c], truth[cells == c]) for c in sorted(set(cells))},
        head_mape=head_mapes(everything),
        condition_head_mape={c: head_mapes(conds == c) for c in order},
        n_cycles=len(bundles),
        n_windows={"charge": sum(len(b.charge_windows) for b in bundles),
                   "discharge": sum(len(b.discharge_windows) for b in bundles),
                   "history": sum(b.history is not None for b in bundles)},
        rows=rows,
        config=dict(config or {}),
    )


def config_echo(config: TrainConfig, split: SplitSpec | None = None) -> dict:
    echo = {k: v for k, v in asdict(config).items() if k not in ("schedule", "model")}
    echo.update({f"schedule.{k}": v for k, v in asdict(config.schedule).items()})
    echo.update({f"model.{k}": v for k, v in asdict(config.model).items()})
    if split is not None:
        echo.update({f"split.{k}": v for k, v in asdict(split).items()})
    return echo
