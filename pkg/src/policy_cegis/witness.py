"""Witness states: where a failing trace leaves the demonstrator's input set."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dynamics import PlantModel, Trace
from .learner import compatibility_rows
from .mpc import Demonstration, DemonstratorError, MpcConfig, feasible_set
from .policy import PolicyParams

log = logging.getLogger(__name__)

INCOMPATIBLE_TOL = 1e-8


class WitnessNotFound(RuntimeError):
    def __init__(self, max_residual: float, scanned: int, skipped: int):
        super().__init__(
            f"witness not found: {scanned} states scanned, {skipped} skipped, "
            f"max constraint residual {max_residual:.3e}"
        )
        self.max_residual = max_residual
        self.scanned = scanned
        self.skipped = skipped


@dataclass
class Witness:
    state: np.ndarray
    demonstration: Demonstration
    trace_index: int
    residual: float       # max_i (A Phi(x) theta - b)_i, > INCOMPATIBLE_TOL
    scanned: int
    skipped: list         # (trace index, reason) for states the demonstrator refused


def compatibility_residual(policy: PolicyParams, demo: Demonstration,
                           saturation_aware: bool = True) -> float:
    """Largest violation by the raw policy output of the rows the learner
    would add for ``demo`` (see ``learner.compatibility_rows``)."""
    box = policy.input_box if saturation_aware else None
    G, h = compatibility_rows(demo.polytope, box)
    if G.shape[0] == 0:
        return -np.inf
    return float(np.max(G @ policy.raw(demo.x) - h))


def extract_witness(trace: Trace, policy: PolicyParams, cfg: MpcConfig, model: PlantModel,
                    tol: float = INCOMPATIBLE_TOL, saturation_aware: bool = True) -> Witness:
    """Scan ``trace`` every MPC step and return the first incompatible state.

    States inside the goal's interior or outside the state box are skipped,
    as are states where the demonstrator itself fails (its value does not
    decrease there or its gradient probes do not converge); those are logged
    in ``Witness.skipped``. When the simulation step is finer than the MPC
    step and the grid scan finds nothing, the states between grid points are
    scanned in order as well.
    """
    stride = int(round(cfg.dt / trace.dt))
    if stride < 1 or abs(stride * trace.dt - cfg.dt) > 1e-9 * cfg.dt:
        raise ValueError(f"trace step {trace.dt} does not divide the MPC step {cfg.dt}")
    worst = -np.inf
    scanned = 0
    skipped = []
    grid = list(range(0, len(trace.states), stride))
    between = [k for k in range(len(trace.states)) if k % stride]
    for k in grid + between:
        x = trace.states[k]
        if not np.all(np.isfinite(x)) or not model.state_box.contains(x):
            skipped.append((k, "outside state box"))
            continue
        if model.goal_box.interior_contains(x):
            continue
        scanned += 1
        try:
            demo = feasible_set(cfg, model, x)
        except DemonstratorError as exc:
            log.info("skipping trace state %d: %s", k, exc)
            skipped.append((k, str(exc)))
            continue
        res = compatibility_residual(policy, demo, saturation_aware)
        worst = max(worst, res)
        if res > tol:
            return Witness(x.copy(), demo, k, res, scanned, skipped)
    raise WitnessNotFound(worst, scanned, len(skipped))
