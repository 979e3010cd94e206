import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tcaq.calibration import CalibrationSet
from tcaq.tcr import (ChannelStats, ScalingVector, apply_reparam, build_timestep_table, channel_maxima, clamp_scaling,
                      collect_channel_maxima, compute_scaling_vector, compute_target_range, group_timesteps,
                      reparam_weight, scale_input, spread, table_mse)
from tcaq.tensor import ShapeError, Tensor, forward


def _set(cells: dict[int, np.ndarray], lid="L") -> CalibrationSet:
    x_t = {t: np.zeros((len(c), 1, 8, 8), np.float32) for t, c in cells.items()}
    return CalibrationSet(x_t, {t: {lid: c} for t, c in cells.items()}, "fp_model", 0, [lid])


def _stats(rows):
    return ChannelStats("L", list(range(len(rows))), np.asarray(rows, dtype=np.float64))


# -- maxima

def test_constant_activation_maxima():
    cs = _set({0: np.full((2, 3, 2, 2), -1.5), 5: np.full((2, 3, 2, 2), -1.5)})
    np.testing.assert_array_equal(collect_channel_maxima(cs, "L").maxima, np.full((2, 3), 1.5))


def test_hand_built_maxima():
    a = np.zeros((2, 2, 1, 2))
    a[0, 0] = [[1.0, -3.0]]
    a[1, 1] = [[0.5, 0.25]]
    b = np.zeros((2, 2, 1, 2))
    b[1, 0] = [[2.0, 0.0]]
    b[0, 1] = [[-4.0, 1.0]]
    st_ = collect_channel_maxima(_set({0: a, 5: b}), "L")
    np.testing.assert_array_equal(st_.maxima, [[3.0, 0.5], [2.0, 4.0]])


def test_duplicate_sample_leaves_maxima():
    a = np.random.default_rng(0).standard_normal((3, 4, 2, 2))
    base = collect_channel_maxima(_set({0: a}), "L").maxima
    dup = collect_channel_maxima(_set({0: np.concatenate([a, a[:1]])}), "L").maxima
    np.testing.assert_array_equal(base, dup)


def test_linear_inputs_use_last_axis():
    x = np.zeros((2, 5, 3))
    x[1, 4, 2] = -7
    np.testing.assert_array_equal(channel_maxima(x), [0, 0, 7])


def test_empty_cell_rejected():
    cs = _set({0: np.zeros((0, 2, 2, 2))})
    with pytest.raises(ValueError, match="empty"):
        collect_channel_maxima(cs, "L")


# -- target range and scaling vector

def test_target_range_examples():
    assert compute_target_range(_stats([[4, 2, 8]]), 0) == 2
    assert compute_target_range(_stats([[3, 3]]), 0) == 3
    assert compute_target_range(_stats([[0, 5]]), 0) == 1e-8


def test_scaling_single_timestep():
    sv = compute_scaling_vector(_stats([[4, 2, 8]]))
    np.testing.assert_allclose(sv.s_tar, [2])
    np.testing.assert_allclose(sv.r_s, [2, 1, 4])
    np.testing.assert_allclose(sv.r_t, [[2, 1, 4]])


def test_scaling_two_timesteps_hand_value():
    sv = compute_scaling_vector(_stats([[4, 2], [2, 2]]))
    np.testing.assert_allclose(sv.s_tar, [2, 2])
    np.testing.assert_allclose(sv.r_t, [[2, 1], [1, 1]])
    np.testing.assert_allclose(sv.r_s, [10 / 6, 1])


def test_duplicated_timestep_rows_leave_r_s():
    rows = [[4, 2, 1], [2, 2, 5]]
    a = compute_scaling_vector(_stats(rows)).r_s
    b = compute_scaling_vector(_stats(rows + [rows[0]])).r_s
    c = compute_scaling_vector(_stats(rows + rows)).r_s
    np.testing.assert_allclose(a, c, rtol=1e-12)
    assert not np.allclose(a, b)


def test_dead_channel_finite():
    sv = compute_scaling_vector(_stats([[0, 1, 3], [0, 2, 3]]))
    assert np.all(np.isfinite(sv.r_s)) and sv.r_s[0] == 1.0


# -- clamp

def test_clamp_examples():
    sv = ScalingVector("L", [0.1, 2, 40], np.zeros(0), np.zeros(0))
    np.testing.assert_allclose(clamp_scaling(sv, 5).r_s, [0.2, 2, 5])
    assert clamp_scaling(sv, None) is sv and clamp_scaling(sv, math.inf) is sv
    with pytest.raises(ValueError):
        clamp_scaling(sv, 0.5)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(1e-3, 1e3)),
       st.floats(1, 50), st.floats(1, 50))
def test_clamp_monotone(r, a, b):
    lo, hi = sorted((a, b))
    sv = ScalingVector("L", r, np.zeros(0), np.zeros(0))
    assert np.all(np.abs(np.log(clamp_scaling(sv, lo).r_s)) <= np.abs(np.log(clamp_scaling(sv, hi).r_s)) + 1e-12)


# -- reparameterization

def test_reparam_ones_is_identity(rng):
    w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
    np.testing.assert_array_equal(reparam_weight(w, np.ones(4)), w)


def test_reparam_conv_output_preserved(rng):
    w = rng.standard_normal((5, 4, 3, 3))
    x = rng.standard_normal((2, 4, 6, 6))
    r = rng.uniform(0.5, 4, 4)
    sv = ScalingVector("L", r, np.zeros(0), np.zeros(0))
    w2, x2 = apply_reparam(w, x, sv)
    ref = forward("conv2d", Tensor(x), Tensor(w)).data
    got = forward("conv2d", Tensor(x2), Tensor(w2)).data
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-5


def test_reparam_linear_output_preserved(rng):
    w = rng.standard_normal((6, 4))
    x = rng.standard_normal((3, 7, 4))
    sv = ScalingVector("L", rng.uniform(0.5, 4, 4), np.zeros(0), np.zeros(0))
    w2, x2 = apply_reparam(w, x, sv)
    ref = forward("linear", Tensor(x), Tensor(w)).data
    assert np.max(np.abs(forward("linear", Tensor(x2), Tensor(w2)).data - ref)) / np.max(np.abs(ref)) < 1e-5


def test_reparam_channel_mismatch():
    with pytest.raises(ShapeError):
        reparam_weight(np.ones((2, 3)), np.ones(4))
    with pytest.raises(ShapeError):
        scale_input(np.ones((1, 3, 2, 2)), np.ones(4))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.just(1), st.integers(2, 8)), elements=st.floats(1e-3, 1e3)))
def test_reparam_balances_single_timestep(M):
    # on one timestep with the unclamped vector, the rescaled maxima are all equal to s_tar
    sv = compute_scaling_vector(_stats(M))
    assert spread(M / sv.r_s) == pytest.approx(1.0, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(1e-2, 1e2)),
       arrays(np.float64, st.integers(1, 6), elements=st.floats(1e-2, 1e2)))
def test_reparam_flattens_shared_profiles(profile, levels):
    # channel ratios that are the same at every timestep are removed completely
    M = levels[:, None] * profile[None, :]
    sv = compute_scaling_vector(_stats(M))
    assert spread(M / sv.r_s) == pytest.approx(1.0, rel=1e-9)


def test_spread_can_grow_when_profiles_disagree():
    # a single r_s is a compromise across timesteps, so balancing is a property of the data, not a
    # guarantee: the first timestep has channel 1 twice as large, the other two are already balanced
    M = np.array([[1.0, 2.0], [2.0, 2.0], [2.0, 2.0]])
    assert spread(M / compute_scaling_vector(_stats(M)).r_s) > spread(M)


# -- timestep tables

def test_group_timesteps_contiguous():
    g = group_timesteps(list(range(0, 100, 5)), 3)
    assert [g[t] for t in range(0, 100, 5)] == [0] * 7 + [1] * 7 + [2] * 6
    with pytest.raises(ValueError):
        group_timesteps([0, 5], 3)


def test_table_structure_and_refinement(trained, calib):
    lid = "mid.conv1"
    one = build_timestep_table(calib, lid, 4, 1)
    full = build_timestep_table(calib, lid, 4, len(calib.timesteps))
    assert one.G == 1 and len({id(one.lookup(t)) for t in calib.timesteps}) == 1
    assert full.G == 20 and len({id(full.lookup(t)) for t in calib.timesteps}) == 20
    assert table_mse(calib, full) <= table_mse(calib, one)
