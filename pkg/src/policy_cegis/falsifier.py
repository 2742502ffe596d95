"""Falsifier: look for an initial state whose closed loop misses the goal.

Blocks of uniform random draws from the initial box alternate with blocks of
adversarial ascent on the finite-horizon closed-loop cost. A state found
either way is confirmed by re-simulating it alone before it is reported.
"""
from __future__ import annotations

import csv
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import minimize

from .dynamics import PlantModel, Trace, rk4_step, simulate_batch, simulate_closed_loop
from .mpc import MpcConfig, trajectory_cost
from .policy import PolicyParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FalsifierConfig:
    """Budgets and simulation settings.

    ``dt`` is the zero-order-hold step of the closed-loop simulation and
    ``max_steps * dt`` the time budget within which the goal must be reached.
    """

    random_budget: int = 100_000
    adversarial_budget: int = 1_000
    dt: float = 0.2
    max_steps: int = 50
    seed: int = 0
    random_block: int = 10_000
    adversarial_block: int = 100
    fd_step: float = 1e-5
    workers: int = 1
    envelope: float = 10.0

    def __post_init__(self):
        for name in ("random_budget", "adversarial_budget", "max_steps", "random_block",
                     "adversarial_block", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.dt > 0 or not self.fd_step > 0:
            raise ValueError("dt and fd_step must be positive")

    @property
    def horizon_time(self) -> float:
        return self.max_steps * self.dt


@dataclass
class Counterexample:
    x0: np.ndarray
    trace: Trace
    phase: str                # "random" or "adversarial"
    draw_index: int           # position in the phase's sequence of visited states
    stats: dict = field(default_factory=dict)


@dataclass
class LikelyCorrect:
    """No failing start found within the budgets (not a proof)."""

    stats: dict = field(default_factory=dict)


Verdict = Union[Counterexample, LikelyCorrect]


def adversarial_objective(model: PlantModel, policy, x0, mpc_cfg: MpcConfig,
                          envelope: float = 10.0) -> np.ndarray:
    """Closed-loop finite-horizon cost ``sum Q(u, x) + H(x_N)`` with
    ``u = policy(x)`` held over each MPC step. Vectorized over rows of ``x0``;
    rollouts that leave the safety envelope (or overflow) score ``+inf``.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    N = int(mpc_cfg.horizon)
    ru, qx, h = mpc_cfg.weights(model)
    X = np.empty((x.shape[0], N + 1, model.state_dim))
    U = np.empty((x.shape[0], N, model.input_dim))
    X[:, 0] = x
    env = model.state_box.scaled(envelope)
    blown = np.zeros(x.shape[0], dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(N):
            # rows that already blew up are parked at zero and reported as +inf
            blown |= ~(np.all(np.isfinite(X[:, k]), axis=1) & env.contains(X[:, k]))
            X[blown, k] = 0.0
            U[:, k] = model.input_box.clip(policy(X[:, k]))
            X[:, k + 1] = rk4_step(model.rhs, X[:, k], U[:, k], mpc_cfg.dt)
        blown |= ~(np.all(np.isfinite(X[:, N]), axis=1) & env.contains(X[:, N]))
        X[blown, N] = 0.0
        J = trajectory_cost(X, U, ru, qx, h)
    return np.where(np.isfinite(J) & ~blown, J, np.inf)


_WORKER: dict = {}


def _init_worker(model, policy, cfg):
    # fork-started workers inherit these without pickling (plants hold closures)
    _WORKER.update(model=model, policy=policy, cfg=cfg)


def _simulate_chunk(x0):
    cfg = _WORKER["cfg"]
    return simulate_batch(_WORKER["model"], _WORKER["policy"], x0, cfg.dt, cfg.max_steps,
                          cfg.envelope)


def make_pool(model, policy, cfg: "FalsifierConfig"):
    if cfg.workers <= 1:
        return None
    ctx = multiprocessing.get_context("fork")
    return ProcessPoolExecutor(cfg.workers, mp_context=ctx, initializer=_init_worker,
                               initargs=(model, policy, cfg))


def _first_failure(model, policy, x0, cfg: FalsifierConfig, pool) -> Optional[int]:
    """Index of the first row of ``x0`` that misses the goal, or ``None``."""
    if pool is None:
        reached, _, _ = simulate_batch(model, policy, x0, cfg.dt, cfg.max_steps, cfg.envelope)
    else:
        chunks = [c for c in np.array_split(x0, cfg.workers) if len(c)]
        reached = np.concatenate([r for r, _, _ in pool.map(_simulate_chunk, chunks)])
    bad = np.flatnonzero(~reached)
    return int(bad[0]) if bad.size else None


def _confirm(model, policy, x0, cfg: FalsifierConfig) -> Optional[Trace]:
    trace, reached = simulate_closed_loop(model, policy, x0, cfg.dt, cfg.max_steps, cfg.envelope)
    return None if reached else trace


def _ascent(model, policy, mpc_cfg, cfg, rng, steps):
    """One projected quasi-Newton ascent run from a random start in the
    initial box. Returns the visited states in order."""
    box = model.initial_box
    n = model.state_dim
    hstep = cfg.fd_step * np.maximum(box.half_widths, 1e-12)
    visited = []

    def neg_obj(x):
        pts = np.vstack([x, x + np.diag(hstep), x - np.diag(hstep)])
        pts = box.clip(pts)
        J = adversarial_objective(model, policy, pts, mpc_cfg, cfg.envelope)
        visited.append(x.copy())
        if not np.isfinite(J[0]):
            # divergent closed loop: maximal objective, nothing to climb
            return -1e300, np.zeros(n)
        width = pts[1:n + 1] - pts[n + 1:]
        grad = (J[1:n + 1] - J[n + 1:]) / np.where(width.diagonal() > 0, width.diagonal(), 1.0)
        grad = np.where(np.isfinite(grad), grad, 0.0)
        return -J[0], -grad

    x0 = box.sample(rng, 1)[0]
    minimize(neg_obj, x0, jac=True, method="L-BFGS-B",
             bounds=list(zip(box.lo, box.hi)), options={"maxiter": steps, "maxfun": 2 * steps})
    return visited


def falsify(cfg: FalsifierConfig, model: PlantModel, policy: PolicyParams,
            mpc_cfg: MpcConfig, rng: Optional[np.random.Generator] = None) -> Verdict:
    """Search the initial box for a start whose trace misses the goal."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    stats = {"random_sims": 0, "adversarial_steps": 0, "adversarial_sims": 0,
             "worst_objective": -np.inf, "seed": cfg.seed,
             "random_budget": cfg.random_budget, "adversarial_budget": cfg.adversarial_budget,
             "time_budget": cfg.horizon_time}
    if model.goal_box.contains_box(model.initial_box):
        return LikelyCorrect(stats)
    pool = make_pool(model, policy, cfg)
    try:
        rand_left, adv_left = cfg.random_budget, cfg.adversarial_budget
        rand_index = adv_index = 0
        while rand_left > 0 or adv_left > 0:
            if rand_left > 0:
                size = min(cfg.random_block, rand_left)
                x0 = model.initial_box.sample(rng, size)
                hit = _first_failure(model, policy, x0, cfg, pool)
                stats["random_sims"] += size if hit is None else hit + 1
                rand_left -= size
                if hit is not None:
                    trace = _confirm(model, policy, x0[hit], cfg)
                    if trace is None:
                        raise RuntimeError("batch and single simulation disagree")
                    return Counterexample(x0[hit].copy(), trace, "random", rand_index + hit, stats)
                rand_index += size
            if adv_left > 0:
                block = min(cfg.adversarial_block, adv_left)
                visited = []
                while block > 0:
                    steps = min(block, 25)
                    run = _ascent(model, policy, mpc_cfg, cfg, rng, steps)
                    visited.extend(run)
                    block -= steps
                    adv_left -= steps
                    stats["adversarial_steps"] += steps
                pts = np.array(visited)
                J = adversarial_objective(model, policy, pts, mpc_cfg, cfg.envelope)
                stats["worst_objective"] = max(stats["worst_objective"], float(J.max()))
                hit = _first_failure(model, policy, pts, cfg, pool)
                stats["adversarial_sims"] += len(pts) if hit is None else hit + 1
                if hit is not None:
                    trace = _confirm(model, policy, pts[hit], cfg)
                    if trace is None:
                        raise RuntimeError("batch and single simulation disagree")
                    return Counterexample(pts[hit].copy(), trace, "adversarial",
                                          adv_index + hit, stats)
                adv_index += len(pts)
    finally:
        if pool is not None:
            pool.shutdown()
    return LikelyCorrect(stats)


def write_counterexample(cex: Counterexample, path_stem, policy: PolicyParams, extra=None):
    """``<stem>.csv`` with ``t, x..., u...`` rows and ``<stem>.json`` header."""
    tr = cex.trace
    n = tr.states.shape[1]
    m = tr.inputs.shape[1] if tr.inputs.size else 0
    with open(f"{path_stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"x{i}" for i in range(n)] + [f"u{j}" for j in range(m)])
        for k, x in enumerate(tr.states):
            u = tr.inputs[k] if k < len(tr.inputs) else [float("nan")] * m
            w.writerow([repr(k * tr.dt)] + [repr(float(v)) for v in x] + [repr(float(v)) for v in u])
    header = {"policy_digest": policy.digest(), "x0": cex.x0.tolist(), "phase": cex.phase,
              "draw_index": cex.draw_index, "diverged": bool(tr.diverged), **cex.stats}
    if extra:
        header.update(extra)
    with open(f"{path_stem}.json", "w") as fh:
        json.dump(header, fh, indent=2, default=float)
