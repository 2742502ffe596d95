"""Run configuration: YAML (or JSON) file -> validated settings -> objects.

Sections: ``plant``, ``basis``, ``mpc``, ``falsifier``, ``learner``,
``seeds`` and an optional ``baseline``. Validation errors name the field.
"""
from __future__ import annotations

import math
import os
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .dynamics import PlantModel, build_plant
from .falsifier import FalsifierConfig
from .cegis import LearnerConfig
from .mpc import SEED_KINDS, MpcConfig, run_demonstrator
from .policy import BasisSet, basis_from_config

ENV_RUN_ROOT = "POLICY_CEGIS_RUN_ROOT"
ENV_WORKERS = "POLICY_CEGIS_WORKERS"


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field path, message)``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PlantSection(_Section):
    kind: Literal["car", "ducted_fan", "integrator"]
    num_cars: int = Field(1, ge=1)
    param_file: Optional[str] = None
    input_half_widths: Optional[list[float]] = None

    @field_validator("input_half_widths")
    @classmethod
    def _positive(cls, v):
        if v is not None and (len(v) != 2 or min(v) <= 0):
            raise ValueError("need two positive half-widths")
        return v


class BasisSection(_Section):
    kind: Literal["car_linear", "car_affine", "fan_trig", "fan_poly", "custom"]
    degree: int = Field(2, ge=0)
    min_degree: int = Field(0, ge=0)
    terms: Optional[list[str]] = None


class MpcSection(_Section):
    horizon: int = Field(..., ge=1)
    dt: float = Field(..., gt=0)
    running_weights: list[float]
    terminal_weights: list[float]
    lam: float = Field(0.5, gt=0, le=1)
    fd_step: float = Field(1e-4, gt=0)
    grad_tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(100, ge=1)
    decrease_margin: float = Field(0.0, ge=0)
    seeds: list[str] = ["lqr", "random"]
    random_seeds: int = Field(16, ge=0)

    @field_validator("running_weights", "terminal_weights")
    @classmethod
    def _nonneg(cls, v):
        if min(v, default=0.0) < 0:
            raise ValueError("weights must be non-negative")
        return v

    @field_validator("seeds")
    @classmethod
    def _kinds(cls, v):
        bad = [s for s in v if s not in SEED_KINDS]
        if bad or not v:
            raise ValueError(f"seed kinds must be a non-empty subset of {list(SEED_KINDS)}")
        return v


class FalsifierSection(_Section):
    random_budget: int = Field(100_000, ge=1)
    adversarial_budget: int = Field(1_000, ge=1)
    dt: float = Field(0.2, gt=0)
    max_steps: Optional[int] = Field(None, ge=1)   # None: 3x median demonstrator time-to-goal
    random_block: int = Field(10_000, ge=1)
    adversarial_block: int = Field(100, ge=1)
    fd_step: float = Field(1e-5, gt=0)
    workers: int = Field(1, ge=1)
    envelope: float = Field(10.0, gt=1)
    budget_samples: int = Field(100, ge=1)
    budget_factor: float = Field(3.0, gt=0)


class LearnerSection(_Section):
    delta: float = Field(100.0, gt=0)
    delta_ball: float = Field(1e-3, gt=0)
    mve_tol: float = Field(1e-10, gt=0)
    init_max_steps: int = Field(200, ge=1)
    demo_check_samples: int = Field(20, ge=0)
    demo_check_steps: int = Field(200, ge=1)
    saturation_aware: bool = True

    @model_validator(mode="after")
    def _ball(self):
        if not self.delta > self.delta_ball:
            raise ValueError("delta must exceed delta_ball")
        return self


class SeedsSection(_Section):
    run: int = Field(0, ge=0)


class BaselineSection(_Section):
    M: list[int] = [10, 100, 1000]
    mode: Literal["uniform", "aggressive"] = "aggressive"
    max_steps: int = Field(200, ge=1)

    @field_validator("M")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) < 1:
            raise ValueError("dataset sizes must be >= 1")
        return v


class RunConfig(_Section):
    name: str = "run"
    plant: PlantSection
    basis: BasisSection
    mpc: MpcSection
    falsifier: FalsifierSection = FalsifierSection()
    learner: LearnerSection = LearnerSection()
    seeds: SeedsSection = SeedsSection()
    baseline: BaselineSection = BaselineSection()


def _errors_from_pydantic(exc: ValidationError):
    for e in exc.errors():
        yield ".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_errors_from_pydantic(exc)) from None


def load_config(path) -> RunConfig:
    """Read a YAML/JSON file, or a bundled preset by name (``car1_linear``)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and preset_path(str(path)) is not None:
        p = preset_path(str(path))
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(p) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([("<file>", f"not valid YAML: {exc}")]) from None
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    # run-directory snapshots record these next to the config
    data.pop("seed", None)
    data.pop("time_budget", None)
    return parse_config(data)


def preset_names() -> list:
    root = resources.files("policy_cegis") / "presets"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".yaml"))


def preset_path(name: str) -> Optional[Path]:
    f = resources.files("policy_cegis") / "presets" / f"{name}.yaml"
    return Path(str(f)) if f.is_file() else None


# ---------------------------------------------------------------------------
# objects


class Built:
    """Plant, basis and component configs assembled from a :class:`RunConfig`."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        errors = []
        self.model: PlantModel = build_plant(cfg.plant.model_dump(exclude_none=True))
        n, m = self.model.state_dim, self.model.input_dim
        if len(cfg.mpc.running_weights) != m + n:
            errors.append(("mpc.running_weights", f"need {m + n} entries (inputs then states)"))
        if len(cfg.mpc.terminal_weights) != n:
            errors.append(("mpc.terminal_weights", f"need {n} entries"))
        try:
            self.basis: BasisSet = basis_from_config(cfg.basis.model_dump(exclude_none=True),
                                                     self.model.state_names, m)
        except (ValueError, KeyError) as exc:
            errors.append(("basis", str(exc)))
        if errors:
            raise ConfigError(errors)
        if self.basis.input_dim != m:
            raise ConfigError([("basis", f"basis has {self.basis.input_dim} channels, plant has {m} inputs")])
        mp = cfg.mpc
        self.mpc = MpcConfig(mp.horizon, mp.dt, tuple(mp.running_weights),
                             tuple(mp.terminal_weights), lam=mp.lam, fd_step=mp.fd_step,
                             grad_tol=mp.grad_tol, max_iter=mp.max_iter,
                             decrease_margin=mp.decrease_margin, seeds=tuple(mp.seeds),
                             random_seeds=mp.random_seeds)
        ratio = mp.dt / cfg.falsifier.dt
        if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
            raise ConfigError([("falsifier.dt", "must divide mpc.dt")])
        lp = cfg.learner
        self.learner = LearnerConfig(delta=lp.delta, delta_ball=lp.delta_ball, mve_tol=lp.mve_tol,
                                     init_max_steps=lp.init_max_steps,
                                     demo_check_samples=lp.demo_check_samples,
                                     demo_check_steps=lp.demo_check_steps,
                                     saturation_aware=lp.saturation_aware)
        self.seed = cfg.seeds.run
        self.time_budget_note: Optional[dict] = None

    def falsifier(self, workers: Optional[int] = None) -> FalsifierConfig:
        f = self.cfg.falsifier
        max_steps = f.max_steps
        if max_steps is None:
            max_steps = self.measured_max_steps()
        env = os.environ.get(ENV_WORKERS)
        if workers is None and env:
            workers = int(env)
        return FalsifierConfig(
            random_budget=f.random_budget, adversarial_budget=f.adversarial_budget, dt=f.dt,
            max_steps=max_steps, seed=self.seed, random_block=f.random_block,
            adversarial_block=f.adversarial_block, fd_step=f.fd_step,
            workers=f.workers if workers is None else max(1, workers), envelope=f.envelope,
        )

    def measured_max_steps(self) -> int:
        """``budget_factor`` times the median demonstrator time-to-goal over
        ``budget_samples`` starts from I, in falsifier steps."""
        f = self.cfg.falsifier
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 2]))
        x0 = self.model.initial_box.sample(rng, f.budget_samples)
        traces = run_demonstrator(self.mpc, self.model, x0, self.cfg.learner.init_max_steps)
        times = [len(t.inputs) * self.mpc.dt for t in traces if t.reached]
        if not times:
            raise ConfigError([("falsifier.max_steps", "demonstrator reached the goal from no sample")])
        t_max = f.budget_factor * float(np.median(times))
        steps = max(1, math.ceil(t_max / f.dt - 1e-9))
        self.time_budget_note = {"median_time_to_goal": float(np.median(times)),
                                 "reached": len(times), "samples": f.budget_samples,
                                 "t_max": t_max, "max_steps": steps}
        return steps


def run_root(default: str = "runs") -> Path:
    return Path(os.environ.get(ENV_RUN_ROOT, default))
