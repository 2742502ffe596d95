"""Regression baseline: fit the policy to demonstrator inputs by least squares.

Training states are the states visited by receding-horizon demonstrator
traces from random initial states, so saturated inputs show up as many
identical targets.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import PlantModel
from .falsifier import Counterexample, FalsifierConfig, falsify
from .mpc import MpcConfig, run_demonstrator, solve_mpc_batch
from .policy import BasisSet, PolicyParams, eval_basis

log = logging.getLogger(__name__)

INITIAL_MODES = ("uniform", "aggressive")


@dataclass
class Dataset:
    """``(x, u*)`` pairs; ``trace[i]`` is the index of the trace pair ``i`` came from."""

    states: np.ndarray
    inputs: np.ndarray
    degraded: np.ndarray
    trace: np.ndarray
    reached: np.ndarray        # per trace

    def __len__(self) -> int:
        return len(self.states)

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for x, u, d, t in zip(self.states, self.inputs, self.degraded, self.trace):
                fh.write(json.dumps({"trace": int(t), "x": x.tolist(), "u": u.tolist(),
                                     "degraded": bool(d)}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Dataset":
        rows = [json.loads(line) for line in open(path) if line.strip()]
        if not rows:
            raise ValueError(f"{path}: empty dataset")
        trace = np.array([r["trace"] for r in rows], dtype=int)
        return cls(np.array([r["x"] for r in rows], dtype=float),
                   np.array([r["u"] for r in rows], dtype=float),
                   np.array([r["degraded"] for r in rows], dtype=bool), trace,
                   np.ones(trace.max() + 1, dtype=bool))


def initial_states(model: PlantModel, M: int, rng: np.random.Generator,
                   mode: str = "uniform") -> np.ndarray:
    """``uniform`` draws from I; ``aggressive`` draws from the outer quarter
    of I in every coordinate (random sign), where the demonstrator saturates."""
    if mode == "uniform":
        return model.initial_box.sample(rng, M)
    if mode == "aggressive":
        c, hw = model.initial_box.center, model.initial_box.half_widths
        mag = rng.uniform(0.75, 1.0, (M, model.state_dim))
        sgn = rng.choice([-1.0, 1.0], (M, model.state_dim))
        return c + sgn * mag * hw
    raise ValueError(f"initial mode must be one of {INITIAL_MODES}")


def collect_dataset(model: PlantModel, mpc_cfg: MpcConfig, M: int, seed: int,
                    max_steps: int = 200, mode: str = "uniform") -> Dataset:
    """Roll the demonstrator from ``M`` initial states and record
    ``(state, first optimal input)`` at every MPC step.

    A start already in the goal contributes the single pair at that start.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    x0 = initial_states(model, M, np.random.default_rng(seed), mode)
    traces = run_demonstrator(mpc_cfg, model, x0, max_steps)
    empty = [i for i, tr in enumerate(traces) if len(tr.inputs) == 0]
    if empty:
        sol = solve_mpc_batch(mpc_cfg, model, x0[empty])
        for j, i in enumerate(empty):
            traces[i].inputs = sol.inputs[j, :1]
            traces[i].degraded = ~sol.converged[j:j + 1]
    states, inputs, degraded, tid = [], [], [], []
    for i, tr in enumerate(traces):
        k = len(tr.inputs)
        states.append(tr.states[:k])
        inputs.append(tr.inputs)
        degraded.append(tr.degraded)
        tid.append(np.full(k, i))
    return Dataset(np.concatenate(states), np.concatenate(inputs), np.concatenate(degraded),
                   np.concatenate(tid), np.array([tr.reached for tr in traces]))


def saturation_fraction(data: Dataset, model: PlantModel, rtol: float = 1e-9) -> float:
    """Fraction of pairs with some input channel at a bound of the input box."""
    box = model.input_box
    tol = rtol * np.maximum(box.half_widths, 1.0)
    at = (np.abs(data.inputs - box.lo) <= tol) | (np.abs(data.inputs - box.hi) <= tol)
    return float(np.mean(np.any(at, axis=1)))


@dataclass
class Fit:
    policy: PolicyParams
    rank: int
    rank_deficient: bool
    residual: float            # sum of squared errors of the unclamped fit
    clamped: bool


def fit_least_squares(basis: BasisSet, data: Dataset, delta: float = 100.0,
                      input_box=None, plant: str = "") -> Fit:
    """Minimum-norm solution of ``min sum_i |Phi(x_i) theta - u_i|^2``, clamped
    to ``[-delta, delta]^K``. Channels with no basis terms get no coefficients;
    feature columns that are identically zero get zero coefficients."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    Phi = eval_basis(basis, data.states)                  # (P, m, K)
    A = Phi.reshape(-1, basis.K)
    y = data.inputs.reshape(-1)
    theta, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    residual = float(np.sum((A @ theta - y) ** 2))
    clamped = bool(np.any(np.abs(theta) > delta))
    theta = np.clip(theta, -delta, delta)
    deficient = int(rank) < basis.K
    if deficient:
        log.warning("design matrix rank %d < K=%d; minimum-norm solution", rank, basis.K)
    policy = PolicyParams(theta, basis, input_box, plant=plant,
                          provenance={"fit": "least_squares", "pairs": len(data),
                                      "rank": int(rank)})
    return Fit(policy, int(rank), deficient, residual, clamped)


@dataclass
class BaselineRow:
    M: int
    mode: str
    pairs: int
    saturation: float
    rank_deficient: bool
    verdict: str
    cex_x0: Optional[list]
    wall_time: float
    policy_digest: str

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BaselineReport:
    rows: list = field(default_factory=list)
    cegis: Optional[dict] = None        # outcome.json of a learn run, if supplied

    def to_dict(self) -> dict:
        return {"regression": [r.to_dict() for r in self.rows], "cegis": self.cegis}

    def table(self) -> str:
        head = f"{'method':<12}{'M':>6}{'mode':>12}{'demos':>8}{'sat':>8}  {'verdict':<16}{'time[s]':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{'regression':<12}{r.M:>6}{r.mode:>12}{r.pairs:>8}"
                         f"{r.saturation:>8.1%}  {r.verdict:<16}{r.wall_time:>9.1f}")
        if self.cegis is not None:
            c = self.cegis
            verdict = "likely_correct" if c.get("outcome") == "success" else c.get("outcome", "?")
            lines.append(f"{'cegis':<12}{'-':>6}{'-':>12}{c.get('demonstrations', 0):>8}"
                         f"{'-':>8}  {verdict:<16}{c.get('wall_time_s', 0.0):>9.1f}")
        return "\n".join(lines)


def run_baseline(model: PlantModel, basis: BasisSet, mpc_cfg: MpcConfig,
                 fals_cfg: FalsifierConfig, Ms=(10, 100, 1000), seed: int = 0,
                 delta: float = 100.0, max_steps: int = 200, mode: str = "uniform",
                 out_dir=None, cegis_outcome: Optional[dict] = None) -> BaselineReport:
    """Collect, fit and falsify for each dataset size in ``Ms``."""
    report = BaselineReport(cegis=cegis_outcome)
    for M in Ms:
        t0 = time.perf_counter()
        data = collect_dataset(model, mpc_cfg, int(M), seed, max_steps, mode)
        fit = fit_least_squares(basis, data, delta, model.input_box, model.name)
        verdict = falsify(fals_cfg, model, fit.policy, mpc_cfg)
        is_cex = isinstance(verdict, Counterexample)
        row = BaselineRow(int(M), mode, len(data), saturation_fraction(data, model),
                          fit.rank_deficient, "counterexample" if is_cex else "likely_correct",
                          verdict.x0.tolist() if is_cex else None,
                          time.perf_counter() - t0, fit.policy.digest())
        report.rows.append(row)
        log.info("regression M=%d: %d pairs, %s", M, len(data), row.verdict)
        if out_dir is not None:
            data.to_jsonl(f"{out_dir}/dataset_M{M}_{mode}.jsonl")
            fit.policy.save(f"{out_dir}/regression_M{M}_{mode}.json")
    return report
