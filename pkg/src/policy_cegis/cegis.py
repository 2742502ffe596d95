"""The learn / falsify / refine loop.

Start from demonstrations along one demonstrator trace, then repeatedly take
the MVE centre of the compatible parameter set as the candidate, falsify it,
and cut the parameter set with a witness state from any counterexample.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import PlantModel
from .falsifier import Counterexample, FalsifierConfig, LikelyCorrect, falsify, write_counterexample
from .learner import (Center, Infeasible, MveError, ParamPolyhedron, SampleSet, TooThin,
                      add_sample, iteration_bound, mve)
from .mpc import DemonstratorError, MpcConfig, demo_check, feasible_set, run_demonstrator
from .policy import BasisSet, PolicyParams
from .witness import INCOMPATIBLE_TOL, WitnessNotFound, extract_witness

log = logging.getLogger(__name__)

LIKELY_CORRECT_NOTE = ("falsification found no counterexample within the stated budgets; "
                       "this is evidence, not a proof, of reachability")


class FrameworkError(RuntimeError):
    """An internal invariant of the loop was violated."""


@dataclass(frozen=True)
class LearnerConfig:
    delta: float = 100.0            # parameter box [-delta, delta]^K
    delta_ball: float = 1e-3        # stop when no ball of this radius fits
    mve_tol: float = 1e-10
    init_max_steps: int = 200       # initial demonstrator trace length cap
    demo_check_samples: int = 20    # 0 disables the pre-run demonstrator check
    demo_check_steps: int = 200
    saturation_aware: bool = True   # rows for the clamped policy (False: raw output in U)

    def __post_init__(self):
        if not self.delta > self.delta_ball > 0:
            raise ValueError("need delta > delta_ball > 0")
        if self.init_max_steps < 1 or self.demo_check_samples < 0:
            raise ValueError("invalid learner step counts")


@dataclass
class Outcome:
    kind: str                       # "success", "no_candidate" or "bound_exceeded"
    iterations: int
    demonstrations: int
    bound: int
    policy: Optional[PolicyParams] = None
    reason: str = ""
    falsifier_stats: dict = field(default_factory=dict)
    wall_time: float = 0.0
    run_dir: Optional[str] = None

    @property
    def exit_code(self) -> int:
        return {"success": 0, "no_candidate": 2, "bound_exceeded": 3}[self.kind]

    def to_dict(self) -> dict:
        d = {"outcome": self.kind, "iterations": self.iterations,
             "demonstrations": self.demonstrations, "iteration_bound": self.bound,
             "reason": self.reason, "falsifier_stats": self.falsifier_stats,
             "wall_time_s": self.wall_time}
        if self.policy is not None:
            d["theta"] = self.policy.theta.tolist()
            d["policy_digest"] = self.policy.digest()
        if self.kind == "success":
            d["note"] = LIKELY_CORRECT_NOTE
        return d


@dataclass
class RunState:
    samples: SampleSet
    poly: ParamPolyhedron
    iteration: int = 0
    theta: Optional[np.ndarray] = None
    records: list = field(default_factory=list)


def falsifier_seed(seed: int, iteration: int, attempt: int) -> int:
    """Deterministic per-iteration falsifier seed derived from the run seed."""
    return int(np.random.SeedSequence([seed, 1, iteration, attempt]).generate_state(1)[0])


class _RunLog:
    """Append-only artifacts in the run directory (no-op without one)."""

    def __init__(self, run_dir: Optional[Path]):
        self.dir = run_dir
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)

    def append(self, name: str, record: dict) -> None:
        if self.dir is not None:
            with open(self.dir / name, "a") as fh:
                fh.write(json.dumps(record, default=_jsonable) + "\n")

    def write(self, name: str, obj) -> None:
        if self.dir is not None:
            with open(self.dir / name, "w") as fh:
                json.dump(obj, fh, indent=2, default=_jsonable)
                fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


def _add_demo(state: RunState, basis: BasisSet, demo, origin: str, runlog: _RunLog,
              input_box) -> int:
    j = state.samples.add(demo.x, demo.polytope)
    state.poly = add_sample(state.poly, basis, demo.x, demo.polytope, j, input_box)
    rows = state.poly.rows_for(j)
    runlog.append("samples.jsonl", {"index": j, "origin": origin, **demo.to_dict()})
    runlog.append("polyhedron.jsonl", {"sample": j, "C": state.poly.C[rows], "d": state.poly.d[rows]})
    return j


def run(model: PlantModel, basis: BasisSet, mpc_cfg: MpcConfig, fals_cfg: FalsifierConfig,
        learner_cfg: LearnerConfig, seed: int, run_dir=None,
        config_snapshot: Optional[dict] = None) -> Outcome:
    """Run the loop to an :class:`Outcome`; artifacts go to ``run_dir`` if given."""
    t_start = time.perf_counter()
    runlog = _RunLog(Path(run_dir) if run_dir is not None else None)
    if config_snapshot is not None:
        runlog.write("config.json", {**config_snapshot, "seed": seed})
    K = basis.K
    row_box = model.input_box if learner_cfg.saturation_aware else None
    bound = iteration_bound(max(K, 2), learner_cfg.delta, learner_cfg.delta_ball)
    init_rng, check_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 0]).spawn(2))

    if learner_cfg.demo_check_samples > 0:
        report = demo_check(mpc_cfg, model, check_rng, learner_cfg.demo_check_samples,
                            learner_cfg.demo_check_steps)
        runlog.write("demo_check.json", {"summary": report.summary(), "details": report.details})
        log.info("demo-check: %s", report.summary())
        if report.violations:
            raise DemonstratorError(f"demonstrator failed its check: {report.summary()}")

    state = RunState(SampleSet(), ParamPolyhedron.box(K, learner_cfg.delta))
    runlog.append("polyhedron.jsonl", {"sample": -1, "box": learner_cfg.delta, "K": K})

    # initial dataset: demonstrations at every MPC step of one demonstrator trace
    x0 = model.initial_box.sample(init_rng, 1)
    trace = run_demonstrator(mpc_cfg, model, x0, learner_cfg.init_max_steps)[0]
    for k, x in enumerate(trace.states):
        if model.goal_box.interior_contains(x):
            continue
        try:
            demo = feasible_set(mpc_cfg, model, x)
        except DemonstratorError as exc:
            log.warning("initial trace state %d skipped: %s", k, exc)
            continue
        _add_demo(state, basis, demo, "initial", runlog, row_box)
    log.info("initial trace: %d steps, %d demonstrations", len(trace.inputs), len(state.samples))

    def finish(outcome: Outcome) -> Outcome:
        outcome.wall_time = time.perf_counter() - t_start
        outcome.run_dir = None if runlog.dir is None else str(runlog.dir)
        runlog.write("outcome.json", outcome.to_dict())
        if outcome.policy is not None:
            if runlog.dir is not None:
                outcome.policy.save(runlog.dir / ("policy.json" if outcome.kind == "success"
                                                  else "last_candidate.json"))
        return outcome

    last_policy = None
    while True:
        state.iteration += 1
        it = state.iteration
        if it > bound:
            return finish(Outcome("bound_exceeded", it - 1, len(state.samples), bound,
                                  last_policy, reason=f"iteration bound {bound} exceeded"))
        t_it = time.perf_counter()
        try:
            res = mve(state.poly, learner_cfg.delta_ball, tol=learner_cfg.mve_tol)
        except MveError as exc:
            if runlog.dir is not None:
                exc.dump(runlog.dir / "mve_failure.json")
            raise
        record = {"iteration": it, "rows": state.poly.num_rows, "samples": len(state.samples)}
        if isinstance(res, Infeasible):
            record.update(mve="infeasible", chebyshev_radius=res.chebyshev_radius)
            runlog.append("iterations.jsonl", record)
            return finish(Outcome("no_candidate", it - 1, len(state.samples), bound, last_policy,
                                  reason="infeasible"))
        if isinstance(res, TooThin):
            record.update(mve="too_thin", min_axis=res.min_axis,
                          chebyshev_radius=res.chebyshev_radius,
                          log_volume=res.ellipsoid.log_volume)
            runlog.append("iterations.jsonl", record)
            return finish(Outcome("no_candidate", it - 1, len(state.samples), bound, last_policy,
                                  reason=f"too thin (min axis {res.min_axis:.3e}, "
                                         f"Chebyshev radius {res.chebyshev_radius:.3e})"))
        assert isinstance(res, Center)
        theta = res.theta
        cand_res = float(np.max(state.poly.residual(theta)))
        if cand_res > INCOMPATIBLE_TOL:
            raise FrameworkError(f"candidate violates collected samples by {cand_res:.3e}")
        state.theta = theta
        policy = PolicyParams(theta, basis, model.input_box, plant=model.name,
                              provenance={"iteration": it, "seed": seed})
        last_policy = policy
        record.update(mve="center", log_volume=res.ellipsoid.log_volume,
                      min_axis=float(res.ellipsoid.semi_axes.min()), mve_iterations=res.iterations,
                      candidate_residual=cand_res, policy_digest=policy.digest())

        witness = None
        for attempt in range(2):
            fseed = falsifier_seed(seed, it, attempt)
            verdict = falsify(replace(fals_cfg, seed=fseed), model, policy, mpc_cfg)
            record[f"falsifier_seed_{attempt}"] = fseed
            if isinstance(verdict, LikelyCorrect):
                record.update(verdict="likely_correct", falsifier=verdict.stats,
                              wall_time_s=time.perf_counter() - t_it)
                runlog.append("iterations.jsonl", record)
                return finish(Outcome("success", it, len(state.samples), bound, policy,
                                      falsifier_stats=verdict.stats))
            assert isinstance(verdict, Counterexample)
            record.update(verdict="counterexample", cex_x0=verdict.x0, cex_phase=verdict.phase,
                          cex_draw_index=verdict.draw_index)
            if runlog.dir is not None:
                write_counterexample(verdict, runlog.dir / f"cex_{it:04d}_{attempt}", policy,
                                     {"iteration": it})
            try:
                witness = extract_witness(verdict.trace, policy, mpc_cfg, model,
                                          saturation_aware=learner_cfg.saturation_aware)
                break
            except WitnessNotFound as exc:
                log.warning("iteration %d: %s", it, exc)
                record[f"witness_not_found_{attempt}"] = exc.max_residual
        if witness is None:
            runlog.append("iterations.jsonl", record)
            raise FrameworkError(f"iteration {it}: no witness on two counterexample traces")

        j = _add_demo(state, basis, witness.demonstration, "witness", runlog, row_box)
        cut = float(np.max(state.poly.C[state.poly.rows_for(j)] @ theta
                           - state.poly.d[state.poly.rows_for(j)]))
        if not cut > INCOMPATIBLE_TOL:
            raise FrameworkError(f"witness does not cut the candidate (residual {cut:.3e})")
        record.update(witness_index=witness.trace_index, witness_state=witness.state,
                      witness_residual=cut, witness_skipped=len(witness.skipped),
                      wall_time_s=time.perf_counter() - t_it)
        runlog.append("iterations.jsonl", record)
        log.info("iteration %d: counterexample %s, witness residual %.3e",
                 it, np.round(verdict.x0, 4).tolist(), cut)
