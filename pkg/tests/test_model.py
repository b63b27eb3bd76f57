from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cerberus_soh.errors import CheckpointError, InputError, ShapeError
from cerberus_soh.featurize import Normalizer, WindowSample, history_window
from cerberus_soh.model import (
    CerberusModel,
    CycleBundle,
    FusionSchedule,
    ModelConfig,
    blend,
    build_bundles,
    bundle_weights,
    checkpoint_dumps,
    checkpoint_loads,
    fuse_estimate,
    fusion_weights,
    head_a_forward,
    head_b_forward,
    head_c_forward,
    head_outputs,
    predict_trajectory,
    total_loss,
)
from cerberus_soh.neural import grad_check

SMALL = ModelConfig(gru_hidden=4, lstm_hidden=3)
NORM = Normalizer(4.1, 0.05, 3.2, 0.1, 3.5)


def model(seed=0, cfg=SMALL) -> CerberusModel:
    return CerberusModel.init(NORM, cfg, seed=seed)


def zero_model(ba=0.0, bb=0.0, bc=0.0) -> CerberusModel:
    m = model()
    for p in m.parameters().values():
        p.data[...] = 0.0
    m.head_a.mlp.biases[-1].data[:] = ba
    m.head_b.mlp.biases[-1].data[:] = bb
    m.head_c.mlp.biases[-1].data[:] = bc
    return m


def window(kind, rng, label=0.9, cycle=1):
    n = 10 if kind == "charge" else 15
    return WindowSample(kind, rng.normal(size=n), "c1", cycle, label)


def bundle(rng, n_charge=2, n_dis=1, hist_len=12, label=0.9, cycle=5) -> CycleBundle:
    hist = None
    if hist_len:
        hist = history_window(np.linspace(3.5, 3.3, hist_len), "c1", cycle - 1, NORM, target=label * 3.5)
    return CycleBundle("c1", cycle, [window("charge", rng, label) for _ in range(n_charge)],
                       [window("discharge", rng, label) for _ in range(n_dis)], hist, label, 0.5)


# -- fusion schedule -----------------------------------------------------------


@pytest.mark.parametrize("n, expected", [(10, (0.4, 0.4, 0.2)), (210, (0.15, 0.15, 0.7)), (110, (0.275, 0.275, 0.45))])
def test_fusion_weight_examples(n, expected):
    w = fusion_weights(n)
    assert (w.alpha, w.beta, w.gamma) == pytest.approx(expected, abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 60), st.floats(1, 500), st.floats(0, 1), st.floats(0, 1), st.integers(0, 1000))
def test_fusion_weights_are_a_clamped_partition(n0, ramp, a, b, n):
    s = FusionSchedule(n0, ramp, min(a, b), max(a, b))
    w = fusion_weights(n, s)
    assert w.alpha + w.beta + w.gamma == 1.0
    assert w.alpha >= 0 and w.beta >= 0
    assert s.w_min <= w.gamma <= s.w_max
    assert fusion_weights(n + 1, s).gamma >= w.gamma


def test_schedule_validation():
    with pytest.raises(InputError):
        FusionSchedule(w_min=0.8, w_max=0.3)
    with pytest.raises(InputError):
        fusion_weights(-1)


# -- heads -------------------------------------------------------------------


def test_zero_parameter_heads_return_final_bias():
    rng = np.random.default_rng(0)
    m = zero_model(0.3, -0.2, 0.95)
    assert head_a_forward(m, window("charge", rng)) == 0.3
    assert head_b_forward(m, window("discharge", rng)) == -0.2
    h = history_window([3.5] * 30, "c1", 30, NORM)
    assert head_c_forward(m, h) == 0.95


def test_heads_check_window_kind_and_length():
    rng = np.random.default_rng(1)
    m = model()
    with pytest.raises(ShapeError):
        head_a_forward(m, window("discharge", rng))
    with pytest.raises(ShapeError):
        head_b_forward(m, WindowSample("discharge", np.zeros(10), "c1", 1, None))
    with pytest.raises(ShapeError):
        m.head_c([np.ones(5)])


def test_heads_are_deterministic_and_stateless():
    rng = np.random.default_rng(2)
    m = model(3)
    w1, w2 = window("discharge", rng), window("discharge", rng)
    assert head_a_forward(m, window("charge", np.random.default_rng(9))) == \
        head_a_forward(m, window("charge", np.random.default_rng(9)))
    both = m.head_b(np.stack([w1.values, w2.values])).data
    swapped = m.head_b(np.stack([w2.values, w1.values])).data
    np.testing.assert_array_equal(both, swapped[::-1])


def test_history_head_accepts_variable_lengths_without_crosstalk():
    m = model(4)
    short, long = np.linspace(1.0, 0.95, 10), np.linspace(1.0, 0.8, 50)
    joint = m.head_c([short, long]).data
    assert joint[0] == pytest.approx(m.head_c([short]).item(), abs=1e-14)
    assert joint[1] == pytest.approx(m.head_c([long]).item(), abs=1e-14)


# -- loss --------------------------------------------------------------------


def test_total_loss_equal_head_errors_give_that_error():
    rng = np.random.default_rng(5)
    m = zero_model(0.7, 0.7, 0.7)
    b = bundle(rng, label=0.9)
    m.schedule = FusionSchedule(n0=0, n_ramp=1, w_min=0.5, w_max=0.5)  # (0.25, 0.25, 0.5)
    assert total_loss(m, [b]).item() == pytest.approx(0.04, abs=1e-12)


def test_total_loss_zero_when_perfect_and_batch_mean():
    rng = np.random.default_rng(6)
    assert total_loss(zero_model(0.9, 0.9, 0.9), [bundle(rng, label=0.9)]).item() == 0.0
    m = model(7)
    b1, b2 = bundle(rng, label=0.9), bundle(rng, n_charge=3, hist_len=0, label=0.8)
    l1, l2 = total_loss(m, [b1]).item(), total_loss(m, [b2]).item()
    assert total_loss(m, [b1, b2]).item() == pytest.approx((l1 + l2) / 2, rel=1e-12)
    assert l1 >= 0 and l2 >= 0


@pytest.mark.parametrize("seed", range(2))
def test_total_loss_gradcheck_all_modalities(seed):
    rng = np.random.default_rng(seed)
    m = model(seed)
    batch = [bundle(rng, hist_len=12), bundle(rng, n_charge=1, n_dis=2, hist_len=3, label=0.8)]
    assert grad_check(lambda: total_loss(m, batch), m.parameters(), max_coords=120, seed=seed) < 1e-4


def test_total_loss_needs_labels():
    b = bundle(np.random.default_rng(0))
    b.label = None
    with pytest.raises(InputError):
        total_loss(model(), [b])


# -- fusion at inference ---------------------------------------------------------


def test_fused_fixed_point_and_arithmetic():
    rng = np.random.default_rng(8)
    assert fuse_estimate(zero_model(0.9, 0.9, 0.9), bundle(rng)) == pytest.approx(3.15, abs=1e-12)
    b = bundle(rng, hist_len=10)  # gamma = 0.2 at n = 10
    assert fuse_estimate(zero_model(1.0, 0.9, 0.8), b) == pytest.approx(3.22, abs=1e-12)


def test_history_only_bundle_uses_head_c():
    rng = np.random.default_rng(9)
    b = bundle(rng, n_charge=0, n_dis=0, hist_len=40)
    assert fuse_estimate(zero_model(5.0, 5.0, 0.8), b) == pytest.approx(0.8 * 3.5, abs=1e-12)
    empty = bundle(rng, n_charge=0, n_dis=0, hist_len=0)
    with pytest.raises(InputError):
        fuse_estimate(model(), empty)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 3), st.integers(0, 3), st.sampled_from([0, 1, 15, 300]))
def test_fused_estimate_in_convex_hull_and_order_free(seed, nc, nd, hl):
    rng = np.random.default_rng(seed)
    if nc == nd == hl == 0:
        hl = 1
    m = model(seed % 5)
    b = bundle(rng, nc, nd, hl)
    out = head_outputs(m, [b])[0] * 3.5
    fused = fuse_estimate(m, b)
    have = out[~np.isnan(out)]
    assert have.min() - 1e-12 <= fused <= have.max() + 1e-12
    shuffled = CycleBundle(b.cell_id, b.cycle_index, b.charge_windows[::-1], b.discharge_windows[::-1],
                           b.history, b.label, b.charge_rate)
    assert fuse_estimate(m, shuffled) == pytest.approx(fused, abs=1e-14)


def test_forced_weights_and_blend():
    rng = np.random.default_rng(10)
    bs = [bundle(rng), bundle(rng, hist_len=0)]
    w = bundle_weights(bs, FusionSchedule(), force=(0.0, 0.0, 1.0))
    np.testing.assert_array_equal(w, [[0, 0, 1], [0, 0, 0]])
    assert blend(np.array([[1.0, np.nan, 0.5]]), np.array([[0.5, 0.0, 0.5]]))[0] == 0.75


# -- rollout -----------------------------------------------------------------


def test_trajectory_is_chained_one_step_predictions():
    m = model(11)
    caps = list(np.linspace(3.5, 3.4, 12))
    h = history_window(caps, "c1", 12, NORM)
    (one,) = predict_trajectory(m, h, 1)
    assert one == pytest.approx(head_c_forward(m, h) * 3.5, abs=1e-14)
    three = predict_trajectory(m, h, 3)
    manual, hist = [], list(caps)
    for k in range(3):
        nxt = head_c_forward(m, history_window(hist, "c1", 12 + k, NORM)) * 3.5
        manual.append(nxt)
        hist.append(nxt)
    np.testing.assert_allclose(three, manual, atol=1e-14)
    with pytest.raises(InputError):
        predict_trajectory(m, h, 0)


def test_short_history_rollout_re_extrapolates():
    m = model(12)
    h = history_window([3.5, 3.49], "c1", 2, NORM)
    assert len(predict_trajectory(m, h, 12)) == 12


# -- bundles -----------------------------------------------------------------


def test_build_bundles_history_and_labels(small_cell):
    norm = Normalizer(4.1, 0.05, 3.2, 0.1, 3.5)
    bundles = build_bundles(small_cell, norm)
    assert [b.cycle_index for b in bundles] == list(range(1, 25))
    assert bundles[0].history is None
    assert bundles[5].history.n_real == 5 and bundles[5].history.end_cycle == 5
    assert bundles[5].history.target == pytest.approx(bundles[5].label)
    assert len(bundles[0].charge_windows) == 7 and len(bundles[0].discharge_windows) == 2


def test_label_free_target_needs_no_discharge(small_cell):
    norm = Normalizer(4.1, 0.05, 3.2, 0.1, 3.5)
    target = small_cell[10]
    stripped = type(target)(target.cell_id, target.cycle_index,
                            [s for s in target.steps if s.kind.value != "discharge_cc"], target.charge_rate)
    (b,) = build_bundles([stripped], norm, with_labels=False, history_records=small_cell[:10])
    full = build_bundles(small_cell[:11], norm, with_labels=False)[-1]
    assert b.label is None
    np.testing.assert_array_equal(b.history.values, full.history.values)


# -- checkpoint --------------------------------------------------------------


def test_checkpoint_roundtrip_is_exact():
    m = model(13, ModelConfig(gru_hidden=3, lstm_hidden=2, relax_mlp=(5, 1), history_mlp=(4, 1)))
    text = checkpoint_dumps(m)
    back = checkpoint_loads(text)
    assert checkpoint_dumps(back) == text
    for k, p in m.parameters().items():
        np.testing.assert_array_equal(back.parameters()[k].data, p.data)
    assert back.normalizer == m.normalizer and back.config == m.config and back.schedule == m.schedule


@pytest.mark.parametrize("mutate", [
    lambda d: d["tensors"][0].__setitem__("shape", [9, 9]),
    lambda d: d["tensors"].pop(),
    lambda d: d["tensors"][1].__setitem__("values", ["a"] * len(d["tensors"][1]["values"])),
    lambda d: d["tensors"][1].__setitem__("values", d["tensors"][1]["values"][:-1]),
    lambda d: d.__setitem__("version", 99),
    lambda d: d.__setitem__("format", "other"),
    lambda d: d["config"].pop("gru_hidden"),
])
def test_checkpoint_rejects_corruption(mutate):
    doc = json.loads(checkpoint_dumps(model()))
    mutate(doc)
    with pytest.raises(CheckpointError):
        checkpoint_loads(json.dumps(doc))
    with pytest.raises(CheckpointError):
        checkpoint_loads("{not json")
