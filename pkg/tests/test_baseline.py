import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from policy_cegis.baseline import (BaselineReport, BaselineRow, Dataset, collect_dataset,
                                   fit_least_squares, initial_states, saturation_fraction)
from policy_cegis.dynamics import Box, car_model, scalar_integrator_model
from policy_cegis.mpc import MpcConfig
from policy_cegis.policy import BasisSet, ChannelBasis, PolicyParams, car_basis, state_terms

CAR_MPC = MpcConfig(10, 0.2, (1, 1, 1, 1, 9, 9), (90, 90, 10, 10))


def synthetic(basis, theta, X):
    U = PolicyParams(theta, basis).raw(X)
    n = len(X)
    return Dataset(X, U, np.zeros(n, bool), np.arange(n), np.ones(n, bool))


def test_exact_recovery():
    rng = np.random.default_rng(0)
    basis = car_basis(1, affine=True)
    theta = rng.normal(size=basis.K)
    fit = fit_least_squares(basis, synthetic(basis, theta, rng.normal(size=(40, 4))))
    assert np.max(np.abs(fit.policy.theta - theta)) < 1e-8
    assert not fit.rank_deficient and fit.residual < 1e-16


def test_empty_channel_and_zero_column():
    ch_x = ChannelBasis(state_terms(["a", "b"]), degree=1, min_degree=1)
    empty = ChannelBasis((), degree=1, min_degree=1)
    basis = BasisSet((ch_x, empty))
    assert basis.sizes == [2, 0]
    X = np.column_stack([np.linspace(-1, 1, 20), np.zeros(20)])   # b column identically zero
    U = np.column_stack([3 * X[:, 0], np.ones(20)])
    fit = fit_least_squares(basis, Dataset(X, U, np.zeros(20, bool), np.arange(20), np.ones(20, bool)))
    assert fit.rank_deficient
    assert fit.policy.theta[0] == pytest.approx(3.0) and fit.policy.theta[1] == 0.0
    assert np.allclose(fit.policy.raw(X)[:, 1], 0.0)


def test_clamped_to_parameter_box():
    rng = np.random.default_rng(1)
    basis = car_basis(1, affine=False)
    theta = np.full(8, 500.0)
    fit = fit_least_squares(basis, synthetic(basis, theta, rng.normal(size=(30, 4))), delta=100)
    assert fit.clamped and np.all(fit.policy.theta == 100.0)


@settings(max_examples=20, deadline=None)
@given(arrays(float, (25, 4), elements=st.floats(-2, 2)), arrays(float, (25, 2), elements=st.floats(-3, 3)))
def test_residual_non_increasing_in_basis(X, U):
    data = Dataset(X, U, np.zeros(25, bool), np.arange(25), np.ones(25, bool))
    r_lin = fit_least_squares(car_basis(1, False), data, delta=1e9).residual
    r_aff = fit_least_squares(car_basis(1, True), data, delta=1e9).residual
    assert r_aff <= r_lin + 1e-9 * (1 + r_lin)


def test_start_in_goal_gives_single_pair():
    model = dataclasses.replace(scalar_integrator_model(), initial_box=Box.symmetric([0.05]))
    cfg = MpcConfig(5, 0.2, (1.0, 2.0), (5.0,))
    data = collect_dataset(model, cfg, 1, seed=0)
    assert len(data) == 1 and data.trace.tolist() == [0]


def test_car_dataset_counts(tmp_path):
    model = car_model(1)
    data = collect_dataset(model, CAR_MPC, 10, seed=5)
    lengths = np.bincount(data.trace)
    assert len(lengths) == 10 and lengths.sum() == len(data)
    assert np.all(model.input_box.contains(data.inputs, tol=1e-12))
    data.to_jsonl(tmp_path / "d.jsonl")
    back = Dataset.from_jsonl(tmp_path / "d.jsonl")
    assert np.array_equal(back.states, data.states) and np.array_equal(back.inputs, data.inputs)


def test_aggressive_initial_states():
    model = car_model(1)
    X = initial_states(model, 200, np.random.default_rng(0), "aggressive")
    frac = np.abs(X) / model.initial_box.half_widths
    assert np.all((frac >= 0.75) & (frac <= 1.0))
    with pytest.raises(ValueError):
        initial_states(model, 3, np.random.default_rng(0), "nope")


def test_saturation_fraction_by_hand():
    model = car_model(1)
    U = np.array([[1.0, 0.0], [0.2, -3.0], [0.3, 0.1], [-0.5, 2.9]])
    data = Dataset(np.zeros((4, 4)), U, np.zeros(4, bool), np.arange(4), np.ones(4, bool))
    assert saturation_fraction(data, model) == 0.5


def test_report_table():
    row = BaselineRow(10, "aggressive", 120, 0.4, False, "counterexample", [0, 0, 0, 0], 1.0, "ab")
    rep = BaselineReport([row], {"outcome": "success", "demonstrations": 12, "wall_time_s": 3.0})
    t = rep.table()
    assert "regression" in t and "cegis" in t and "counterexample" in t
    assert rep.to_dict()["regression"][0]["M"] == 10
