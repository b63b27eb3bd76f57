"""The three-headed capacity model.

* head a: charge-relaxation windows -> 2-layer bi-GRU -> MLP 100-50-1
* head b: discharge-relaxation windows -> 2-layer bi-GRU -> MLP 100-50-1
* head c: expanding capacity history -> 2-layer LSTM (final cell state) -> MLP 50-20-1

Outputs are normalized capacities (Ah / capacity_scale). Per cycle the heads
are blended with confidence weights (alpha, beta, 1 - alpha - beta) that
shift from the relaxation heads to the history head as history accumulates.
"""

from __future__ import annotations

import json
import logging
from bisect import bisect_left
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .battery_data import CycleRecord, coulomb_count_discharge, extract_relaxation
from .errors import CheckpointError, DataError, InputError, MissingStepError, ShapeError
from .featurize import (
    MIN_HISTORY,
    WINDOW_INTERVAL_S,
    WINDOW_SIZE,
    HistoryWindow,
    Normalizer,
    WindowSample,
    downsample,
    history_window,
    slide_windows,
)
from .neural import GruLayer, LstmLayer, Mlp, Tensor, bigru_forward, lstm_forward, mlp_forward

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cerberus-soh-checkpoint"
CHECKPOINT_VERSION = 1
HEADS = ("a", "b", "c")


@dataclass(frozen=True)
class FusionSchedule:
    n0: float = 10
    n_ramp: float = 200
    w_min: float = 0.2
    w_max: float = 0.7

    def __post_init__(self):
        if not (0 <= self.w_min <= self.w_max <= 1):
            raise InputError(f"need 0 <= w_min <= w_max <= 1, got {self.w_min}, {self.w_max}")
        if not self.n_ramp > 0:
            raise InputError(f"n_ramp must be positive, got {self.n_ramp}")


@dataclass(frozen=True)
class FusionWeights:
    alpha: float
    beta: float
    gamma: float

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma])


def fusion_weights(n: float, s: FusionSchedule = FusionSchedule()) -> FusionWeights:
    """History confidence ramps linearly from ``w_min`` at ``n0`` cycles to
    ``w_max`` at ``n0 + n_ramp``; the remainder is split evenly between the
    two relaxation heads."""
    if n < 0:
        raise InputError(f"history length must be >= 0, got {n}")
    gamma = s.w_min + (s.w_max - s.w_min) * (n - s.n0) / s.n_ramp
    gamma = float(min(max(gamma, s.w_min), s.w_max))
    half = (1.0 - gamma) / 2.0
    return FusionWeights(half, half, gamma)


@dataclass(frozen=True)
class ModelConfig:
    gru_hidden: int = 64
    lstm_hidden: int = 32
    rnn_layers: int = 2
    relax_mlp: tuple[int, ...] = (100, 50, 1)
    history_mlp: tuple[int, ...] = (50, 20, 1)

    def __post_init__(self):
        if self.gru_hidden < 1 or self.lstm_hidden < 1 or self.rnn_layers < 1:
            raise InputError(f"hidden sizes and layer count must be positive: {self}")
        if self.relax_mlp[-1] != 1 or self.history_mlp[-1] != 1:
            raise InputError("MLP heads must end in a single output")


@dataclass
class RelaxHead:
    gru: list[tuple[GruLayer, GruLayer]]
    mlp: Mlp

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "RelaxHead":
        H = cfg.gru_hidden
        gru = []
        for k in range(cfg.rnn_layers):
            d = 1 if k == 0 else 2 * H
            gru.append((GruLayer.init(d, H, rng), GruLayer.init(d, H, rng)))
        return cls(gru, Mlp.init([2 * H, *cfg.relax_mlp], rng))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, (f, b) in enumerate(self.gru):
            out.update({f"gru.{k}.fwd.{n}": t for n, t in f.parameters().items()})
            out.update({f"gru.{k}.bwd.{n}": t for n, t in b.parameters().items()})
        out.update({f"mlp.{n}": t for n, t in self.mlp.parameters().items()})
        return out

    def __call__(self, x) -> Tensor:
        """(N, T) or (N, T, 1) z-scored windows -> (N,) normalized capacities."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.ndim == 2:
            x = x.reshape(*x.shape, 1)
        return mlp_forward(self.mlp, bigru_forward(self.gru, x)).reshape(-1)


@dataclass
class HistoryHead:
    lstm: list[LstmLayer]
    mlp: Mlp

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "HistoryHead":
        H = cfg.lstm_hidden
        lstm = [LstmLayer.init(1 if k == 0 else H, H, rng) for k in range(cfg.rnn_layers)]
        return cls(lstm, Mlp.init([H, *cfg.history_mlp], rng))

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, layer in enumerate(self.lstm):
            out.update({f"lstm.{k}.{n}": t for n, t in layer.parameters().items()})
        out.update({f"mlp.{n}": t for n, t in self.mlp.parameters().items()})
        return out

    def __call__(self, histories: Sequence[np.ndarray]) -> Tensor:
        """Variable-length histories -> (M,) next-cycle normalized capacities.

        Sequences are left-padded to a common length and padded steps masked,
        which leaves each final cell state identical to an unpadded run.
        """
        lengths = [len(h) for h in histories]
        if not lengths or min(lengths) < MIN_HISTORY:
            raise ShapeError(f"history windows need >= {MIN_HISTORY} cycles, got lengths {lengths[:5]}")
        T = max(lengths)
        x = np.zeros((len(histories), T, 1))
        mask = np.zeros((len(histories), T))
        for j, h in enumerate(histories):
            x[j, T - len(h):, 0] = h
            mask[j, T - len(h):] = 1.0
        if min(lengths) == T:
            mask = None
        return mlp_forward(self.mlp, lstm_forward(self.lstm, x, mask)).reshape(-1)


@dataclass
class CerberusModel:
    head_a: RelaxHead
    head_b: RelaxHead
    head_c: HistoryHead
    normalizer: Normalizer
    schedule: FusionSchedule = field(default_factory=FusionSchedule)
    config: ModelConfig = field(default_factory=ModelConfig)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def init(cls, normalizer: Normalizer, config: ModelConfig = ModelConfig(),
             schedule: FusionSchedule = FusionSchedule(), seed: int = 0) -> "CerberusModel":
        rng = np.random.default_rng(seed)
        return cls(RelaxHead.init(config, rng), RelaxHead.init(config, rng), HistoryHead.init(config, rng),
                   normalizer, schedule, config)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for tag, head in zip(HEADS, (self.head_a, self.head_b, self.head_c)):
            out.update({f"head_{tag}.{n}": t for n, t in head.parameters().items()})
        return out

    def head(self, tag: str):
        return {"a": self.head_a, "b": self.head_b, "c": self.head_c}[tag]


# ---------------------------------------------------------------------------
# per-cycle bundles


@dataclass
class CycleBundle:
    cell_id: str
    cycle_index: int
    charge_windows: list[WindowSample]
    discharge_windows: list[WindowSample]
    history: HistoryWindow | None
    label: float | None = None  # normalized capacity
    charge_rate: float = 0.0

    @property
    def history_length(self) -> int:
        return 0 if self.history is None else self.history.n_real

    def present(self) -> np.ndarray:
        return np.array([bool(self.charge_windows), bool(self.discharge_windows), self.history is not None])


def _windows(record: CycleRecord, kind: str, label: float | None, norm: Normalizer) -> list[WindowSample]:
    try:
        curve = extract_relaxation(record, kind)
    except MissingStepError as exc:
        log.warning("%s; %s modality dropped", exc, kind)
        return []
    curve = downsample(curve, WINDOW_INTERVAL_S)
    return slide_windows(curve, WINDOW_SIZE[kind], label, norm)


def build_bundles(records: Sequence[CycleRecord], norm: Normalizer, with_labels: bool = True,
                  history_records: Sequence[CycleRecord] | None = None) -> list[CycleBundle]:
    """One bundle per record of a single cell.

    History for cycle n is every earlier cycle of the cell in
    ``history_records`` (default: ``records``), pinned at the first cycle.
    Without labels the target cycles themselves need no discharge step.
    """
    if not records:
        return []
    pool = sorted(history_records if history_records is not None else records, key=lambda r: r.cycle_index)
    ids = {r.cell_id for r in pool} | {r.cell_id for r in records}
    if len(ids) != 1:
        raise DataError(f"bundles from several cells: {sorted(ids)}")
    for group in (pool, records):
        seen = Counter(r.cycle_index for r in group)
        dup = sorted(n for n, k in seen.items() if k > 1)
        if dup:
            raise DataError(f"cell {group[0].cell_id}: duplicate cycle_index {dup[0]}")
    rate = Counter(r.charge_rate for r in pool or records).most_common(1)[0][0]
    pool_cycles = [r.cycle_index for r in pool]

    bundles = []
    for rec in sorted(records, key=lambda r: r.cycle_index):
        earlier = pool[: bisect_left(pool_cycles, rec.cycle_index)]
        label_ah = _capacity(rec) if with_labels else None
        history = None
        if earlier:
            caps = [_capacity(r) for r in earlier]
            history = history_window(caps, rec.cell_id, earlier[-1].cycle_index, norm, target=label_ah)
        bundles.append(CycleBundle(
            cell_id=rec.cell_id,
            cycle_index=rec.cycle_index,
            charge_windows=_windows(rec, "charge", label_ah, norm),
            discharge_windows=_windows(rec, "discharge", label_ah, norm),
            history=history,
            label=None if label_ah is None else label_ah / norm.capacity_scale,
            charge_rate=rate,
        ))
    return bundles


def _capacity(rec: CycleRecord) -> float:
    return rec.capacity if rec.capacity is not None else coulomb_count_discharge(rec)


# ---------------------------------------------------------------------------
# forward passes


def _check_window(window: WindowSample, kind: str) -> None:
    if window.kind != kind or len(window.values) != WINDOW_SIZE[kind]:
        raise ShapeError(f"expected a {kind} window of {WINDOW_SIZE[kind]} samples, "
                         f"got {window.kind} of {len(window.values)}")


def head_a_forward(p: CerberusModel, window: WindowSample) -> float:
    _check_window(window, "charge")
    return p.head_a(window.values[None, :]).item()


def head_b_forward(p: CerberusModel, window: WindowSample) -> float:
    _check_window(window, "discharge")
    return p.head_b(window.values[None, :]).item()


def head_c_forward(p: CerberusModel, history: HistoryWindow) -> float:
    return p.head_c([history.values]).item()


def bundle_weights(bundles: Sequence[CycleBundle], schedule: FusionSchedule,
                   force: Sequence[float] | None = None) -> np.ndarray:
    """(B, 3) fusion weights renormalized over the modalities each bundle has.

    ``force`` replaces the schedule with fixed weights (head ablations); a
    bundle lacking every forced modality gets an all-zero row.
    """
    out = np.zeros((len(bundles), 3))
    for j, b in enumerate(bundles):
        w = np.asarray(force, dtype=np.float64) if force is not None else \
            fusion_weights(b.history_length, schedule).as_array()
        present = b.present()
        if not present.any():
            raise InputError(f"cell {b.cell_id} cycle {b.cycle_index}: no modality present")
        w = w * present
        total = w.sum()
        if total > 0:
            if not present.all() and force is None:
                log.debug("cell %s cycle %d: weights renormalized over %s",
                          b.cell_id, b.cycle_index, [h for h, ok in zip(HEADS, present) if ok])
            out[j] = w / total
    return out


def _stack(windows: Iterable[WindowSample]) -> np.ndarray:
    return np.stack([w.values for w in windows])


def total_loss(p: CerberusModel, batch: Sequence[CycleBundle]) -> Tensor:
    """Batch mean of alpha*MSE_a + beta*MSE_b + gamma*MSE_c.

    Per bundle, MSE_a/MSE_b average over that cycle's windows and MSE_c is
    the squared error of the single next-cycle prediction. Missing
    modalities drop out and the remaining weights are renormalized.
    """
    if not batch:
        raise InputError("empty batch")
    if any(b.label is None for b in batch):
        raise InputError("every bundle in a training batch needs a label")
    weights = bundle_weights(batch, p.schedule)
    B = len(batch)
    loss = None
    for h, tag in enumerate(("a", "b")):
        attr = "charge_windows" if tag == "a" else "discharge_windows"
        coef, target, wins = [], [], []
        for j, b in enumerate(batch):
            ws = getattr(b, attr)
            if ws:
                wins.extend(ws)
                coef.extend([weights[j, h] / (len(ws) * B)] * len(ws))
                target.extend([b.label] * len(ws))
        if wins:
            err = p.head(tag)(_stack(wins)) - np.array(target)
            term = (err * err * np.array(coef)).sum()
            loss = term if loss is None else loss + term
    idx = [j for j, b in enumerate(batch) if b.history is not None]
    if idx:
        pred = p.head_c([batch[j].history.values for j in idx])
        err = pred - np.array([batch[j].label for j in idx])
        term = (err * err * (weights[idx, 2] / B)).sum()
        loss = term if loss is None else loss + term
    return loss


def head_outputs(p: CerberusModel, bundles: Sequence[CycleBundle]) -> np.ndarray:
    """(B, 3) per-bundle head estimates (window means for a/b), NaN where absent."""
    out = np.full((len(bundles), 3), np.nan)
    for h, attr in enumerate(("charge_windows", "discharge_windows")):
        owners, wins = [], []
        for j, b in enumerate(bundles):
            ws = getattr(b, attr)
            wins.extend(ws)
            owners.extend([j] * len(ws))
        if wins:
            pred = p.head(HEADS[h])(_stack(wins)).data
            owners = np.array(owners)
            sums = np.bincount(owners, weights=pred, minlength=len(bundles))
            counts = np.bincount(owners, minlength=len(bundles))
            has = counts > 0
            out[has, h] = sums[has] / counts[has]
    idx = [j for j, b in enumerate(bundles) if b.history is not None]
    if idx:
        out[idx, 2] = p.head_c([bundles[j].history.values for j in idx]).data
    return out


def blend(outputs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum ignoring NaN heads (their weight is zero by construction)."""
    return np.where(weights > 0, np.nan_to_num(outputs) * weights, 0.0).sum(axis=1)


def fuse_estimate(p: CerberusModel, bundle: CycleBundle) -> float:
    """Fused current capacity in Ah."""
    return float(fuse_estimates(p, [bundle])[0])


def fuse_estimates(p: CerberusModel, bundles: Sequence[CycleBundle]) -> np.ndarray:
    if not bundles:
        return np.zeros(0)
    outputs = head_outputs(p, bundles)
    return blend(outputs, bundle_weights(bundles, p.schedule)) * p.normalizer.capacity_scale


def predict_trajectory(p: CerberusModel, history: HistoryWindow, horizon: int) -> list[float]:
    """Recursive one-step rollout of head c; returns ``horizon`` capacities in Ah."""
    if horizon < 1:
        raise InputError(f"horizon must be >= 1, got {horizon}")
    scale = p.normalizer.capacity_scale
    real = list(history.values[-history.n_real:] * scale)
    end = history.end_cycle
    window = history
    out = []
    for _ in range(horizon):
        nxt = head_c_forward(p, window) * scale
        out.append(nxt)
        real.append(nxt)
        end += 1
        window = history_window(real, history.cell_id, end, p.normalizer)
    return out


# ---------------------------------------------------------------------------
# checkpoint


def _expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    template = CerberusModel.init(Normalizer(0.0, 1.0, 0.0, 1.0, 1.0), config)
    return {k: t.shape for k, t in template.parameters().items()}


def checkpoint_dumps(p: CerberusModel) -> str:
    """Self-describing JSON; floats are written with the shortest repr that
    round-trips a 64-bit double exactly."""
    cfg = asdict(p.config)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": p.version,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
        "schedule": asdict(p.schedule),
        "normalizer": asdict(p.normalizer),
        "tensors": [
            {"name": name, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in p.parameters().items()
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def checkpoint_loads(text: str) -> CerberusModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a cerberus-soh checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        cfg = dict(doc["config"])
        for key in ("relax_mlp", "history_mlp"):
            cfg[key] = tuple(cfg[key])
        config = ModelConfig(**cfg)
        schedule = FusionSchedule(**doc["schedule"])
        normalizer = Normalizer(**doc["normalizer"])
        tensors = {t["name"]: t for t in doc["tensors"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header: {exc}") from None

    expected = _expected_shapes(config)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"tensor set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    model = CerberusModel.init(normalizer, config, schedule)
    for name, param in model.parameters().items():
        entry = tensors[name]
        shape = tuple(entry.get("shape", ()))
        if shape != expected[name]:
            raise CheckpointError(f"{name}: shape {list(shape)} does not match expected {list(expected[name])}")
        try:
            values = np.asarray(entry.get("values", []), dtype=np.float64)
        except (TypeError, ValueError):
            raise CheckpointError(f"{name}: non-numeric values") from None
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{name}: {values.size} values for shape {list(shape)}")
        if not np.all(np.isfinite(values)):
            raise CheckpointError(f"{name}: non-finite values")
        param.data[...] = values.reshape(shape)
    return model
