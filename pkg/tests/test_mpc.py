import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from policy_cegis.dynamics import car_model, rk4_step, scalar_integrator_model
from policy_cegis.mpc import (ControlPolytope, EmptyPolytopeError, MpcConfig, chebyshev_center,
                              feasible_set, run_demonstrator, shift_inputs, solve_mpc,
                              value_gradient)


def riccati(q, r, h, dt, N):
    """Scalar LQ backward recursion for x+ = x + dt u; returns (P_0, K_0)."""
    P = h
    K = None
    for _ in range(N):
        K = P * dt / (r + dt * dt * P)
        P = q + P - (P * dt) ** 2 / (r + dt * dt * P)
    return P, K


def scalar_cfg(N=5, dt=0.1, r=1.0, q=2.0, h=5.0, **kw):
    return MpcConfig(N, dt, (r, q), (h,), grad_tol=1e-9, max_iter=200, **kw)


@pytest.mark.parametrize("x", [-0.9, -0.3, 0.45, 1.0])
@pytest.mark.parametrize("N", [1, 5, 12])
def test_scalar_matches_riccati(x, N):
    model = scalar_integrator_model()
    cfg = scalar_cfg(N=N)
    P, K = riccati(2.0, 1.0, 5.0, 0.1, N)
    U, V, ok = solve_mpc(cfg, model, np.array([x]))
    assert ok
    assert abs(U[0, 0] - (-K * x)) < 1e-6
    assert abs(V - P * x * x) < 1e-6
    g = value_gradient(cfg, model, np.array([x]), U)
    assert abs(g[0] - 2 * P * x) < 1e-4


def test_scalar_one_step_by_hand():
    # V(x) = q x^2 + min_u r u^2 + h (x + dt u)^2
    q, r, h, dt, x = 2.0, 1.0, 5.0, 0.1, 0.7
    u = -h * dt * x / (r + h * dt * dt)
    V = q * x * x + r * u * u + h * (x + dt * u) ** 2
    U, Vs, _ = solve_mpc(scalar_cfg(N=1), scalar_integrator_model(), np.array([x]))
    assert abs(U[0, 0] - u) < 1e-9 and abs(Vs - V) < 1e-9


def test_scalar_saturated_one_step():
    # strictly convex in u, so the box optimum is the clipped unconstrained one
    model = scalar_integrator_model(input_bound=0.5)
    q, r, h, dt, x = 0.0, 0.01, 100.0, 0.5, 1.0
    u = float(np.clip(-h * dt * x / (r + h * dt * dt), -0.5, 0.5))
    U, V, _ = solve_mpc(scalar_cfg(N=1, dt=dt, r=r, q=q, h=h), model, np.array([x]))
    assert U[0, 0] == pytest.approx(u, abs=1e-9)
    assert V == pytest.approx(r * u * u + h * (x + dt * u) ** 2, abs=1e-9)


def test_config_validation():
    with pytest.raises(ValueError):
        scalar_cfg(lam=0.0)
    with pytest.raises(ValueError):
        MpcConfig(0, 0.1, (1, 1), (1,))
    with pytest.raises(ValueError):
        scalar_cfg(seeds=("bogus",))
    with pytest.raises(ValueError):
        MpcConfig(3, 0.1, (1, 1, 1), (1,)).weights(scalar_integrator_model())


@pytest.mark.parametrize("lam", [0.1, 0.5, 1.0])
def test_u_star_in_feasible_polytope_car(lam):
    model = car_model(1)
    cfg = MpcConfig(10, 0.2, (1, 1, 1, 1, 9, 9), (90, 90, 10, 10), lam=lam)
    rng = np.random.default_rng(7)
    for x in model.initial_box.sample(rng, 4):
        demo = feasible_set(cfg, model, x)
        assert demo.decrease < 0
        scale = 1.0 + np.abs(demo.polytope.b).max()
        assert demo.polytope.contains(demo.u_star, tol=1e-9 * scale)


def test_polytope_half_space_matches_decrease():
    model = car_model(1)
    cfg = MpcConfig(10, 0.2, (1, 1, 1, 1, 9, 9), (90, 90, 10, 10), lam=0.5)
    x = np.array([1.0, -0.5, 0.3, -0.2])
    demo = feasible_set(cfg, model, x)
    a, c = demo.polytope.A[0], demo.polytope.b[0]
    rng = np.random.default_rng(0)
    for u in model.input_box.sample(rng, 50):
        lhs = demo.grad @ model.rhs(x, u)
        assert (a @ u <= c) == (lhs <= 0.5 * demo.decrease)


def test_chebyshev_center_square():
    A = np.vstack([np.eye(2), -np.eye(2)])
    c, r = chebyshev_center(A, np.ones(4))
    assert np.allclose(c, 0, atol=1e-9) and r == pytest.approx(1.0)


def test_empty_polytope_rejected():
    with pytest.raises(EmptyPolytopeError):
        ControlPolytope(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))


def test_shift_inputs():
    U = np.arange(6.0).reshape(1, 3, 2)
    assert np.array_equal(shift_inputs(U)[0], [[2, 3], [4, 5], [4, 5]])


def test_scalar_demonstrator_value_decreases():
    model = scalar_integrator_model()
    cfg = scalar_cfg(N=8, dt=0.2)
    traces = run_demonstrator(cfg, model, np.array([[1.0], [-0.8], [0.35]]), 50)
    for tr in traces:
        assert tr.reached
        assert np.all(np.diff(tr.values) < 0)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-1, 1), r=st.floats(0.1, 10), q=st.floats(0, 10), h=st.floats(0.1, 50))
def test_scalar_value_property(x, r, q, h):
    cfg = scalar_cfg(N=4, r=r, q=q, h=h)
    P, _ = riccati(q, r, h, 0.1, 4)
    _, V, _ = solve_mpc(cfg, scalar_integrator_model(), np.array([x]))
    assert V == pytest.approx(P * x * x, abs=1e-7 * max(1.0, P))


CAR_CFG = MpcConfig(10, 0.2, (1, 1, 1, 1, 9, 9), (90, 90, 10, 10), lam=0.5)


def test_scalar_unit_step_example():
    # min (u^2 + 1) + 10 (1 + u)^2  =>  u* = -10/11
    cfg = scalar_cfg(N=1, dt=1.0, r=1.0, q=1.0, h=10.0)
    model = scalar_integrator_model()
    U, V, ok = solve_mpc(cfg, model, np.array([1.0]))
    assert ok
    assert U[0, 0] == pytest.approx(-10 / 11, abs=1e-9)
    assert V == pytest.approx(1 + 100 / 121 + 10 / 121, abs=1e-9)
    # V(x) = x^2 (1 + 100/121 + 10/121), so dV/dx at 1 is twice that
    g = value_gradient(cfg, model, np.array([1.0]), U)
    assert g[0] == pytest.approx(2 * (1 + 100 / 121 + 10 / 121), abs=1e-4)


def test_goal_centre_is_cost_minimum():
    for model, cfg in ((car_model(1), CAR_CFG), (car_model(2), MpcConfig(
            10, 0.2, (1,) * 4 + (1, 1, 9, 9) * 2, (90, 90, 10, 10) * 2))):
        U, V, _ = solve_mpc(cfg, model, np.zeros(model.state_dim))
        assert np.max(np.abs(U)) < 1e-6 and V < 1e-10


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_car_mirror_symmetry(seed):
    # (y, v, a, b, u1, u2) -> (-y, v, -a, -b, u1, -u2) maps trajectories to trajectories
    model = car_model(1)
    S = np.array([-1.0, 1.0, -1.0, -1.0])
    x = model.initial_box.scaled(0.6).sample(np.random.default_rng(seed), 1)[0]
    d1 = feasible_set(CAR_CFG, model, x)
    d2 = feasible_set(CAR_CFG, model, S * x)
    assert d2.value == pytest.approx(d1.value, rel=1e-6)
    assert np.allclose(d2.u_star, [d1.u_star[0], -d1.u_star[1]], atol=1e-4)
    assert np.allclose(d2.grad, S * d1.grad, atol=1e-3 * (1 + np.abs(d1.grad).max()))


def test_lambda_one_puts_u_star_on_boundary():
    model = car_model(1)
    cfg = MpcConfig(10, 0.2, (1, 1, 1, 1, 9, 9), (90, 90, 10, 10), lam=1.0)
    demo = feasible_set(cfg, model, np.array([1.2, 0.5, -0.4, 0.3]))
    a, c = demo.polytope.A[0], demo.polytope.b[0]
    assert a @ demo.u_star - c == pytest.approx(0.0, abs=1e-9 * (1 + abs(c)))


def test_feasible_sets_nest_in_lambda():
    # with a negative decrease the offset lam*dec - grad.f falls as lam grows,
    # so a larger lam gives the smaller set
    model = car_model(1)
    rng = np.random.default_rng(2)
    for x in model.initial_box.sample(rng, 3):
        lo = feasible_set(MpcConfig(10, 0.2, (1, 1, 1, 1, 9, 9), (90, 90, 10, 10), lam=0.1), model, x)
        hi = feasible_set(MpcConfig(10, 0.2, (1, 1, 1, 1, 9, 9), (90, 90, 10, 10), lam=0.9), model, x)
        us = model.input_box.sample(rng, 400)
        in_hi = np.all(us @ hi.polytope.A.T <= hi.polytope.b, axis=1)
        in_lo = np.all(us @ lo.polytope.A.T <= lo.polytope.b, axis=1)
        assert not np.any(in_hi & ~in_lo)
        assert np.all(hi.polytope.vertices() @ lo.polytope.A.T <= lo.polytope.b + 1e-9)


def test_polytope_inside_input_box_with_interior():
    model = car_model(1)
    demo = feasible_set(CAR_CFG, model, np.array([-1.5, 1.0, 0.6, -0.2]))
    V = demo.polytope.vertices()
    assert np.all(model.input_box.contains(V, tol=1e-9))
    assert demo.polytope.radius > 0
    assert demo.polytope.contains(demo.polytope.interior_point)


def test_vertices_recheck_against_rhs():
    model = car_model(1)
    rng = np.random.default_rng(9)
    for x in model.initial_box.sample(rng, 4):
        demo = feasible_set(CAR_CFG, model, x)
        for u in demo.polytope.vertices():
            lhs = demo.grad @ model.rhs(x, u)
            assert lhs <= CAR_CFG.lam * demo.decrease + 1e-8 * (1 + np.abs(demo.grad).sum())


@pytest.mark.parametrize("x0", [[1.5, -1.0, 0.5, -0.5], [-0.354, 1.75, 0.271, -0.193]])
def test_worst_vertex_selection_decreases_value(x0):
    # the vertex with the least decrease, re-chosen every 0.01 s; the guarantee is
    # infinitesimal, and holding the bang-bang vertex for 0.05 s already lets the
    # second-order terms win near the second start
    model = car_model(1)
    x = np.array(x0)
    demo = feasible_set(CAR_CFG, model, x)
    values = [demo.value]
    for _ in range(20):
        V = demo.polytope.vertices()
        u = V[np.argmax([demo.grad @ model.rhs(x, v) for v in V])]
        x = rk4_step(model.rhs, x, u, 0.01)
        demo = feasible_set(CAR_CFG, model, x, warm_start=demo.u_sequence)
        values.append(demo.value)
    assert np.all(np.diff(values) < 0)
