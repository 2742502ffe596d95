"""End-to-end acceptance checks, one group per criterion.

The learning runs use the bundled presets through the CLI entry point; each
is run once per session and shared between the criteria that inspect it.
A summary line per criterion is printed at the end of the session.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from policy_cegis.baseline import run_baseline
from policy_cegis.cli import main
from policy_cegis.config import Built, load_config
from policy_cegis.dynamics import scalar_integrator_model
from policy_cegis.learner import ParamPolyhedron, iteration_bound, mve
from policy_cegis.mpc import MpcConfig, demo_check, feasible_set, solve_mpc, value_gradient

_RUNS = {}


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance_runs")


def learn(root: Path, preset: str, tag: str = "") -> dict:
    key = preset + tag
    if key not in _RUNS:
        rd = root / key
        t0 = time.perf_counter()
        code = main(["learn", preset, "--run-dir", str(rd)])
        wall = time.perf_counter() - t0
        outcome = json.loads((rd / "outcome.json").read_text()) if (rd / "outcome.json").exists() else {}
        its = [json.loads(line) for line in open(rd / "iterations.jsonl")] \
            if (rd / "iterations.jsonl").exists() else []
        _RUNS[key] = {"code": code, "wall": wall, "outcome": outcome, "iterations": its, "dir": rd}
    return _RUNS[key]


def describe(r):
    o = r["outcome"]
    return (f"{o.get('outcome', 'error')} in {o.get('iterations', '?')} iterations, "
            f"{o.get('demonstrations', '?')} demonstrations, {r['wall']:.0f} s")


# 1 -------------------------------------------------------------------------

def test_c1_car1_linear(runs_root, record_criterion):
    b = Built(load_config("car1_linear"))
    assert b.basis.K == 8
    fals = b.cfg.falsifier
    r = learn(runs_root, "car1_linear")
    record_criterion(1, f"car1_linear: {describe(r)}")
    assert (fals.random_budget, fals.adversarial_budget) == (100_000, 1_000)
    assert r["code"] == 0 and r["outcome"]["outcome"] == "success"
    assert r["outcome"]["iterations"] <= 20
    assert r["wall"] <= 600
    assert (r["dir"] / "policy.json").exists()


# 2 -------------------------------------------------------------------------

@pytest.mark.parametrize("preset,K", [("car2_linear", 32), ("car2_affine", 36)])
def test_c2_two_cars(runs_root, record_criterion, preset, K):
    assert Built(load_config(preset)).basis.K == K
    r = learn(runs_root, preset)
    record_criterion(2, f"{preset}: {describe(r)}")
    assert r["code"] == 0 and r["outcome"]["iterations"] <= 100


# 3 -------------------------------------------------------------------------

def test_c3_fan_trig(runs_root, record_criterion):
    r = learn(runs_root, "ductedfan_trig")
    record_criterion(3, f"ductedfan_trig: {describe(r)} (limit 184 demonstrations)")
    assert r["code"] == 0 and r["outcome"]["demonstrations"] <= 4 * 46


def test_c3_fan_poly_fail(runs_root, record_criterion):
    r = learn(runs_root, "ductedfan_poly_fail")
    record_criterion(3, f"ductedfan_poly_fail: {describe(r)}")
    assert r["code"] == 2 and r["outcome"]["outcome"] == "no_candidate"


# 4 -------------------------------------------------------------------------

def test_c4_bound_value(record_criterion):
    v = iteration_bound(10, 100, 1e-3)
    record_criterion(4, f"bound(K=10, 100, 1e-3) = {v}")
    assert v == 1093


def test_c4_runs_within_bound(runs_root, record_criterion):
    checked = 0
    for key in ("car1_linear", "car2_linear", "car2_affine", "ductedfan_trig",
                "ductedfan_poly_fail"):
        r = learn(runs_root, key)
        o = r["outcome"]
        b = Built(load_config(key))
        assert o["iteration_bound"] == iteration_bound(max(b.basis.K, 2), b.learner.delta,
                                                       b.learner.delta_ball)
        assert o["iterations"] <= o["iteration_bound"]
        checked += 1
    record_criterion(4, f"{checked} runs within their bound")


# 5 -------------------------------------------------------------------------

def test_c5_hypercube(record_criterion):
    record_criterion(5, "hypercube")
    E = mve(ParamPolyhedron.box(4, 1.0), 1e-3).ellipsoid
    assert np.max(np.abs(E.center)) <= 1e-8
    assert np.max(np.abs(E.B @ E.B.T - np.eye(4))) <= 1e-8


def _brute_force_simplex_center():
    # max over centres c of the largest affine image of the incircle: for a
    # triangle the best ellipsoid about c is limited by the nearest edge in
    # the metric where the triangle is equilateral; grid search that metric
    T = np.array([[1.0, 0.5], [0.0, np.sqrt(3) / 2]])     # unit simplex -> equilateral
    Ti = np.linalg.inv(T)
    C = np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]])
    d = np.array([0.0, 0.0, 1.0])
    Ce = C @ Ti
    lo, hi = np.zeros(2), np.ones(2)
    for _ in range(6):            # zooming grid search
        a, b = np.meshgrid(np.linspace(lo[0], hi[0], 201), np.linspace(lo[1], hi[1], 201))
        pts = np.column_stack([a.ravel(), b.ravel()])
        pts = pts[(pts.min(axis=1) >= 0) & (pts.sum(axis=1) <= 1)]
        r = np.min((d - (pts @ T.T) @ Ce.T) / np.linalg.norm(Ce, axis=1), axis=1)
        best = pts[np.argmax(r)]
        w = (hi - lo) / 20
        lo, hi = best - w, best + w
    return best


def test_c5_simplex(record_criterion):
    C = np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]])
    d = np.array([0.0, 0.0, 1.0])
    poly = ParamPolyhedron(C, d, np.zeros(3, int), 1.0)
    c = mve(poly, 1e-6).theta
    ref = _brute_force_simplex_center()
    record_criterion(5, f"simplex centre error {np.max(np.abs(c - ref)):.1e}")
    assert np.max(np.abs(c - [1 / 3, 1 / 3])) <= 1e-4
    assert np.max(np.abs(c - ref)) <= 1e-4


def test_c5_random_polytopes(record_criterion):
    worst_res, fails = -np.inf, 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        k = 2 + seed % 2
        m = rng.integers(k + 2, 4 * k + 4)
        C = np.vstack([rng.normal(size=(m, k)), np.eye(k), -np.eye(k)])
        d = np.concatenate([rng.uniform(0.2, 2.0, m), np.full(2 * k, 3.0)])
        E = mve(ParamPolyhedron(C, d, np.zeros(len(d), int), 3.0), 1e-9).ellipsoid
        worst_res = max(worst_res, float(np.max(E.containment_residual(C, d))))
        for _ in range(50):
            c = rng.uniform(-0.3, 0.3, k)
            if np.any(C @ c >= d):
                continue
            B = rng.normal(size=(k, k))
            s = np.min((d - C @ c) / np.linalg.norm(C @ B, axis=1))
            fails += np.linalg.slogdet(s * B)[1] > E.log_volume + 1e-9
    record_criterion(5, f"100 random polytopes: max containment residual {worst_res:.1e}, "
                        f"{fails} larger sampled ellipsoids")
    assert worst_res <= 1e-8 and fails == 0


# 6 -------------------------------------------------------------------------

def test_c6_scalar_closed_form(record_criterion):
    model = scalar_integrator_model()
    q, r, h, dt, N = 2.0, 1.0, 5.0, 0.1, 6
    cfg = MpcConfig(N, dt, (r, q), (h,), grad_tol=1e-9, max_iter=200)
    P, K = h, None
    for _ in range(N):
        K = P * dt / (r + dt * dt * P)
        P = q + P - (P * dt) ** 2 / (r + dt * dt * P)
    errs = [0.0, 0.0, 0.0]
    for x in (-0.8, 0.25, 0.9):
        U, V, _ = solve_mpc(cfg, model, np.array([x]))
        g = value_gradient(cfg, model, np.array([x]), U)[0]
        errs = [max(errs[0], abs(U[0, 0] + K * x)), max(errs[1], abs(V - P * x * x)),
                max(errs[2], abs(g - 2 * P * x))]
    record_criterion(6, f"scalar oracle errors u* {errs[0]:.1e}, V* {errs[1]:.1e}, dV* {errs[2]:.1e}")
    assert errs[0] <= 1e-6 and errs[1] <= 1e-6 and errs[2] <= 1e-4


@pytest.mark.parametrize("preset", ["car1_linear", "car2_linear", "ductedfan_trig"])
def test_c6_value_decreases(record_criterion, preset):
    b = Built(load_config(preset))
    rep = demo_check(b.mpc, b.model, np.random.default_rng(20), 20, 200)
    record_criterion(6, f"{preset}: {rep.summary()}")
    assert rep.violations == 0 and rep.reached == 20


@pytest.mark.parametrize("preset", ["car1_linear", "ductedfan_trig"])
def test_c6_u_star_feasible(record_criterion, preset):
    b = Built(load_config(preset))
    worst = -np.inf
    rng = np.random.default_rng(6)
    xs = b.model.initial_box.sample(rng, 5)
    for lam in (0.1, 0.5, 1.0):
        cfg = MpcConfig(b.mpc.horizon, b.mpc.dt, b.mpc.running_weights, b.mpc.terminal_weights,
                        lam=lam, seeds=b.mpc.seeds, random_seeds=b.mpc.random_seeds)
        for x in xs:
            demo = feasible_set(cfg, b.model, x)
            scale = 1.0 + np.abs(demo.polytope.b).max()
            worst = max(worst, float(np.max(demo.polytope.residual(demo.u_star))) / scale)
    record_criterion(6, f"{preset}: max scaled U_lambda residual of u* {worst:.1e}")
    assert worst <= 1e-9


# 7 -------------------------------------------------------------------------

def test_c7_witness_contract(runs_root, record_criterion):
    cuts = candidates = 0
    bad = []
    runs = [("car1_linear", ""), ("car2_linear", ""), ("car2_affine", ""),
            ("ductedfan_trig", ""), ("ductedfan_poly_fail", ""), ("car1_linear", "_repeat")]
    for preset, tag in runs:
        key = preset + tag
        r = learn(runs_root, preset, tag)
        for it in r["iterations"]:
            if it.get("mve") == "center":
                candidates += 1
                if not it["candidate_residual"] <= 1e-8:
                    bad.append((key, it["iteration"], "candidate"))
            if "witness_residual" in it:
                cuts += 1
                if not it["witness_residual"] > 1e-8:
                    bad.append((key, it["iteration"], "witness"))
    record_criterion(7, f"{candidates} candidates, {cuts} witness rows, {len(bad)} violations")
    assert candidates > 0 and cuts > 0 and not bad


# 8 -------------------------------------------------------------------------

def test_c8_baseline(runs_root, record_criterion, tmp_path):
    b = Built(load_config("car1_affine"))
    fals = b.falsifier()
    cegis = learn(runs_root, "car1_affine")["outcome"]
    rep = run_baseline(b.model, b.basis, b.mpc, fals, (10, 100, 1000), seed=0,
                       delta=b.learner.delta, max_steps=200, mode="aggressive",
                       out_dir=tmp_path, cegis_outcome=cegis)
    print("\n" + rep.table())
    sats = [row.saturation for row in rep.rows]
    verdicts = [row.verdict for row in rep.rows]
    record_criterion(8, "regression verdicts " + ", ".join(
        f"M={row.M}: {row.verdict} ({row.saturation:.0%} saturated)" for row in rep.rows))
    assert [row.M for row in rep.rows] == [10, 100, 1000]
    assert all(v in ("counterexample", "likely_correct") for v in verdicts)
    assert min(sats) > 0.10
    assert "cegis" in rep.table()


# 9 -------------------------------------------------------------------------

def test_c9_reproducible(runs_root, record_criterion):
    a = learn(runs_root, "car1_linear")
    b = learn(runs_root, "car1_linear", "_repeat")
    cex = lambda r: [it.get("cex_x0") for it in r["iterations"]]  # noqa: E731
    same = (a["outcome"]["outcome"] == b["outcome"]["outcome"],
            a["outcome"].get("theta") == b["outcome"].get("theta"),
            cex(a) == cex(b))
    record_criterion(9, f"car1_linear twice: outcome/theta/counterexamples identical = {same}")
    assert all(same)
