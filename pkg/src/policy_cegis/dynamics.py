"""Plant models, RK4 discretization and closed-loop simulation.

All right-hand sides are vectorized over leading axes: ``rhs(x, u)`` accepts
``x`` of shape ``(..., n)`` and ``u`` of shape ``(..., m)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional, Sequence

import numpy as np


class DynamicsError(RuntimeError):
    """Non-finite or otherwise invalid evaluation of a plant model."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned closed box ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError(f"empty box: lo={lo}, hi={hi}")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, half_widths: Sequence[float]) -> "Box":
        h = np.asarray(half_widths, dtype=float)
        return cls(-h, h)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_widths(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, x, tol: float = 0.0):
        x = np.asarray(x)
        return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)

    def interior_contains(self, x):
        x = np.asarray(x)
        return np.all((x > self.lo) & (x < self.hi), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lo >= self.lo) and np.all(other.hi <= self.hi))

    def clip(self, x):
        return np.clip(x, self.lo, self.hi)

    def scaled(self, factor: float) -> "Box":
        c, h = self.center, self.half_widths
        return Box(c - factor * h, c + factor * h)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def to_list(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.lo, self.hi)]


@dataclass(frozen=True)
class PlantModel:
    """Continuous-time plant ``xdot = F(x, u)`` with its operating boxes.

    ``drift`` and ``input_matrix`` give the control-affine split
    ``F(x, u) = f(x) + g(x) u`` when available. ``jacobian`` returns
    ``(dF/dx, dF/du)`` with shapes ``(..., n, n)`` and ``(..., n, m)``.
    """

    name: str
    state_dim: int
    input_dim: int
    rhs: Callable[[np.ndarray, np.ndarray], np.ndarray]
    state_box: Box
    input_box: Box
    initial_box: Box
    goal_box: Box
    drift: Optional[Callable[[np.ndarray], np.ndarray]] = None
    input_matrix: Optional[Callable[[np.ndarray], np.ndarray]] = None
    jacobian: Optional[Callable[[np.ndarray, np.ndarray], tuple]] = None
    state_names: tuple = ()
    input_names: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.input_dim < 1:
            raise ValueError("state and input dimensions must be positive")
        for label, box, dim in (
            ("state_box", self.state_box, self.state_dim),
            ("initial_box", self.initial_box, self.state_dim),
            ("goal_box", self.goal_box, self.state_dim),
            ("input_box", self.input_box, self.input_dim),
        ):
            if box.dim != dim:
                raise ValueError(f"{label} has dimension {box.dim}, expected {dim}")
        if not self.state_box.contains_box(self.initial_box):
            raise ValueError("initial box must lie inside the state box")
        if not self.state_box.contains_box(self.goal_box):
            raise ValueError("goal box must lie inside the state box")
        if not self.state_names:
            object.__setattr__(
                self, "state_names", tuple(f"x{i}" for i in range(self.state_dim))
            )
        if not self.input_names:
            object.__setattr__(
                self, "input_names", tuple(f"u{i}" for i in range(self.input_dim))
            )

    @property
    def control_affine(self) -> bool:
        return self.drift is not None and self.input_matrix is not None

    def in_goal(self, x):
        return self.goal_box.contains(x)


# ---------------------------------------------------------------------------
# evaluation and integration


def _check_finite(values: np.ndarray, names: Sequence[str], what: str):
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.argwhere(bad.reshape(-1, values.shape[-1]))[0, 1]
        raise DynamicsError(f"non-finite {what} in component '{names[idx]}'")


def eval_rhs(model: PlantModel, x, u) -> np.ndarray:
    """Evaluate ``F(x, u)`` for a single state/input pair with input checks."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (model.state_dim,):
        raise ValueError(f"state has shape {x.shape}, expected ({model.state_dim},)")
    if u.shape != (model.input_dim,):
        raise ValueError(f"input has shape {u.shape}, expected ({model.input_dim},)")
    box = model.input_box
    if not box.contains(u, tol=1e-12):
        raise ValueError(f"input {u} outside input box {box.to_list()}")
    u = box.clip(u)
    dx = np.asarray(model.rhs(x, u), dtype=float)
    _check_finite(dx, model.state_names, "derivative")
    return dx


def rk4_step(rhs, x, u, dt: float):
    """One classical Runge-Kutta step with the input held constant."""
    k1 = rhs(x, u)
    k2 = rhs(x + 0.5 * dt * k1, u)
    k3 = rhs(x + 0.5 * dt * k2, u)
    k4 = rhs(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def discrete_step(model: PlantModel, x, u, dt: float) -> np.ndarray:
    """RK4 discretization ``F_hat(x, u)`` of the plant over one step ``dt``."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != model.state_dim or u.shape[-1] != model.input_dim:
        raise ValueError("dimension mismatch in discrete_step")
    with np.errstate(all="ignore"):
        out = rk4_step(model.rhs, x, u, dt)
    _check_finite(out, model.state_names, "state after integration step")
    return out


def fd_jacobian(model: PlantModel, x, u, eps: float = 1e-6):
    """Central finite-difference Jacobians of the right-hand side."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = model.state_dim, model.input_dim
    A = np.empty(x.shape[:-1] + (n, n))
    B = np.empty(x.shape[:-1] + (n, m))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        A[..., :, i] = (model.rhs(x + e, u) - model.rhs(x - e, u)) / (2 * eps)
    for j in range(m):
        e = np.zeros(m)
        e[j] = eps
        B[..., :, j] = (model.rhs(x, u + e) - model.rhs(x, u - e)) / (2 * eps)
    return A, B


def rhs_jacobian(model: PlantModel, x, u):
    if model.jacobian is not None:
        return model.jacobian(x, u)
    return fd_jacobian(model, x, u)


def rk4_step_jacobian(model: PlantModel, x, u, dt: float):
    """RK4 step together with its exact Jacobians ``(x_next, Ad, Bd)``.

    Derivatives are propagated through the four stages by the chain rule.
    """
    f = model.rhs
    h = 0.5 * dt
    k1 = f(x, u)
    x2 = x + h * k1
    k2 = f(x2, u)
    x3 = x + h * k2
    k3 = f(x3, u)
    x4 = x + dt * k3
    k4 = f(x4, u)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    A1, B1 = rhs_jacobian(model, x, u)
    A2, B2 = rhs_jacobian(model, x2, u)
    A3, B3 = rhs_jacobian(model, x3, u)
    A4, B4 = rhs_jacobian(model, x4, u)
    eye = np.eye(model.state_dim)
    # dk_i = Kx_i dx + Ku_i du
    Kx1, Ku1 = A1, B1
    Kx2 = A2 @ (eye + h * Kx1)
    Ku2 = A2 @ (h * Ku1) + B2
    Kx3 = A3 @ (eye + h * Kx2)
    Ku3 = A3 @ (h * Ku2) + B3
    Kx4 = A4 @ (eye + dt * Kx3)
    Ku4 = A4 @ (dt * Ku3) + B4
    Ad = eye + (dt / 6.0) * (Kx1 + 2.0 * Kx2 + 2.0 * Kx3 + Kx4)
    Bd = (dt / 6.0) * (Ku1 + 2.0 * Ku2 + 2.0 * Ku3 + Ku4)
    return x_next, Ad, Bd


# ---------------------------------------------------------------------------
# closed-loop simulation


@dataclass
class Trace:
    """Sampled closed-loop trajectory; ``inputs`` is one shorter than ``states``."""

    dt: float
    states: np.ndarray
    inputs: np.ndarray
    diverged: bool = False

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.states))

    def __len__(self):
        return len(self.states)


def simulate_batch(
    model: PlantModel,
    policy: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    dt: float,
    max_steps: int,
    envelope: float = 10.0,
):
    """Simulate many initial states at once.

    Returns ``(reached, steps, diverged)`` arrays. ``steps`` is the index of
    the first state inside the goal box (or ``max_steps``). Trajectories that
    reach the goal or leave the safety envelope are dropped from the batch.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    count = x.shape[0]
    reached = np.asarray(model.goal_box.contains(x), dtype=bool).copy()
    diverged = np.zeros(count, dtype=bool)
    steps = np.full(count, max_steps, dtype=int)
    steps[reached] = 0
    env = model.state_box.scaled(envelope)
    active = np.flatnonzero(~reached)
    xa = x[active]
    ubox = model.input_box
    for k in range(1, max_steps + 1):
        if active.size == 0:
            break
        with np.errstate(all="ignore"):
            ua = ubox.clip(policy(xa))
            xa = rk4_step(model.rhs, xa, ua, dt)
        bad = ~(np.all(np.isfinite(xa), axis=1) & env.contains(xa))
        hit = model.goal_box.contains(xa) & ~bad
        if np.any(hit):
            reached[active[hit]] = True
            steps[active[hit]] = k
        if np.any(bad):
            diverged[active[bad]] = True
            steps[active[bad]] = k
        keep = ~(hit | bad)
        active = active[keep]
        xa = xa[keep]
    return reached, steps, diverged


def simulate_closed_loop(
    model: PlantModel,
    policy: Callable[[np.ndarray], np.ndarray],
    x0,
    dt: float,
    max_steps: int,
    envelope: float = 10.0,
):
    """Simulate one closed-loop trace until goal entry or ``max_steps``.

    ``policy`` maps a batch of states ``(k, n)`` to inputs ``(k, m)``; the same
    vectorized code path as :func:`simulate_batch` is used so that both agree
    bit for bit. Returns ``(trace, reached)``; ``trace.diverged`` marks an exit
    from the safety envelope (``envelope`` times the state box).
    """
    x = np.array(x0, dtype=float).reshape(1, -1)
    if x.shape[1] != model.state_dim:
        raise ValueError("initial state has wrong dimension")
    if not model.state_box.contains(x[0]):
        raise ValueError("initial state outside the state box")
    env = model.state_box.scaled(envelope)
    ubox = model.input_box
    states = [x[0].copy()]
    inputs = []
    if model.goal_box.contains(x[0]):
        return Trace(dt, np.array(states), np.zeros((0, model.input_dim))), True
    for _ in range(max_steps):
        with np.errstate(all="ignore"):
            u = ubox.clip(policy(x))
            x = rk4_step(model.rhs, x, u, dt)
        inputs.append(u[0].copy())
        states.append(x[0].copy())
        if not (np.all(np.isfinite(x)) and env.contains(x[0])):
            trace = Trace(dt, np.array(states), np.array(inputs), diverged=True)
            return trace, False
        if model.goal_box.contains(x[0]):
            return Trace(dt, np.array(states), np.array(inputs)), True
    return Trace(dt, np.array(states), np.array(inputs)), False


# ---------------------------------------------------------------------------
# case-study plants

CAR_AXLE_BASE = 3.0
CAR_NOMINAL_SPEED = 10.0


def car_model(num_cars: int = 1, axle_base: float = CAR_AXLE_BASE,
              nominal_speed: float = CAR_NOMINAL_SPEED) -> PlantModel:
    """Reduced bicycle model for ``num_cars`` independent cars.

    Per-car state is ``(y, v, alpha, beta)`` with ``v`` measured relative to
    the nominal speed; per-car inputs are ``(u1, u2)``.
    """
    if num_cars < 1:
        raise ValueError("need at least one car")
    l = num_cars
    b, v0 = float(axle_base), float(nominal_speed)

    def split(x):
        x = np.asarray(x)
        xr = x.reshape(x.shape[:-1] + (l, 4))
        return xr[..., 0], xr[..., 1], xr[..., 2], xr[..., 3]

    def drift(x):
        y, v, a, beta = split(x)
        out = np.zeros(np.shape(x)[:-1] + (l, 4))
        out[..., 0] = (v + v0) * np.sin(a)
        out[..., 2] = (v + v0) / b * beta
        return out.reshape(np.shape(x))

    g_const = np.zeros((4 * l, 2 * l))
    for c in range(l):
        g_const[4 * c + 1, 2 * c] = 1.0
        g_const[4 * c + 3, 2 * c + 1] = 1.0

    def input_matrix(x):
        return np.broadcast_to(g_const, np.shape(x)[:-1] + g_const.shape)

    def rhs(x, u):
        y, v, a, beta = split(x)
        u = np.asarray(u)
        ur = u.reshape(u.shape[:-1] + (l, 2))
        shape = np.broadcast_shapes(v.shape, ur.shape[:-1])
        out = np.empty(shape + (4,))
        out[..., 0] = (v + v0) * np.sin(a)
        out[..., 1] = ur[..., 0]
        out[..., 2] = (v + v0) / b * beta
        out[..., 3] = ur[..., 1]
        return out.reshape(shape[:-1] + (4 * l,))

    def jacobian(x, u):
        y, v, a, beta = split(x)
        lead = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        A = np.zeros(lead + (4 * l, 4 * l))
        for c in range(l):
            r = 4 * c
            A[..., r, r + 1] = np.sin(a[..., c])
            A[..., r, r + 2] = (v[..., c] + v0) * np.cos(a[..., c])
            A[..., r + 2, r + 1] = beta[..., c] / b
            A[..., r + 2, r + 3] = (v[..., c] + v0) / b
        B = np.broadcast_to(g_const, lead + g_const.shape).copy()
        return A, B

    tile = lambda per_car: np.tile(np.asarray(per_car, dtype=float), l)  # noqa: E731
    names = []
    inames = []
    for c in range(l):
        sfx = "" if l == 1 else f"_{c + 1}"
        names += [f"y{sfx}", f"v{sfx}", f"alpha{sfx}", f"beta{sfx}"]
        inames += [f"u1{sfx}", f"u2{sfx}"]
    return PlantModel(
        name=f"car{l}",
        state_dim=4 * l,
        input_dim=2 * l,
        rhs=rhs,
        state_box=Box.symmetric(tile([10.0, 8.0, np.pi, 5.0])),
        input_box=Box.symmetric(tile([1.0, 3.0])),
        initial_box=Box.symmetric(tile([2.0, 2.0, 1.0, 1.0])),
        goal_box=Box.symmetric(tile([0.1, 0.1, 0.1, 0.1])),
        drift=drift,
        input_matrix=input_matrix,
        jacobian=jacobian,
        state_names=tuple(names),
        input_names=tuple(inames),
        params={"num_cars": l, "axle_base": b, "nominal_speed": v0},
    )


# ducted fan ---------------------------------------------------------------

FAN_TRIM_STATE = np.array([6.0, 0.0, 0.177, 0.0, 0.0])
FAN_TRIM_INPUT = np.array([3.2, -0.138])  # (thrust, thrust angle)
FAN_STATE_SCALE = np.array([0.4, 1.0, 1.0, 1.0, 1.0])


def load_fan_params(path=None) -> dict:
    """Load ducted-fan constants; defaults ship with the package."""
    if path is None:
        text = resources.files("policy_cegis").joinpath("data/ducted_fan.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    params = json.loads(text)
    required = ("mass_kg", "inertia", "weight_N", "moment_arm_m", "aero")
    missing = [k for k in required if k not in params]
    if missing:
        raise ValueError(f"ducted fan parameter file missing fields: {missing}")
    return params


def fan_aero(params: dict, v, alpha):
    """Drag, lift and pitching moment as quadratic-in-speed coefficient maps."""
    c = params["aero"]
    q = v * v
    drag = q * (c["drag"][0] + c["drag"][1] * alpha * alpha)
    lift = q * (c["lift"][0] + c["lift"][1] * alpha)
    moment = q * (c["moment"][0] + c["moment"][1] * alpha)
    return drag, lift, moment


def fan_physical_rhs(params: dict, x, thrust, angle):
    """Original thrust/angle form of the planar ducted-fan equations."""
    m, J = params["mass_kg"], params["inertia"]
    W, lT = params["weight_N"], params["moment_arm_m"]
    v, gam, beta, dbeta, h = (x[..., i] for i in range(5))
    alpha = beta - gam
    D, L, M = fan_aero(params, v, alpha)
    out = np.empty(np.broadcast_shapes(np.shape(x), np.shape(thrust) + (5,)))
    out[..., 0] = (-D - W * np.sin(gam) + thrust * np.cos(alpha + angle)) / m
    out[..., 1] = (L - W * np.cos(gam) + thrust * np.sin(alpha + angle)) / (m * v)
    out[..., 2] = dbeta
    out[..., 3] = (M - thrust * lT * np.sin(angle)) / J
    out[..., 4] = v * np.sin(gam)
    return out


def ducted_fan_model(params: Optional[dict] = None, input_half_widths=(3.0, 1.5)) -> PlantModel:
    """Ducted fan in scaled, trim-centred coordinates with inputs ``(du_c, du_s)``.

    ``x = [0.4, 1, 1, 1, 1] * (x_phys - x_trim)`` and ``(u_c, u_s) =
    (u cos(delta_u), u sin(delta_u))`` shifted by their trim values, which
    makes the dynamics affine in the input.
    """
    p = load_fan_params() if params is None else params
    m, J = p["mass_kg"], p["inertia"]
    W, lT = p["weight_N"], p["moment_arm_m"]
    scale = FAN_STATE_SCALE
    inv_scale = 1.0 / scale
    uc0 = FAN_TRIM_INPUT[0] * np.cos(FAN_TRIM_INPUT[1])
    us0 = FAN_TRIM_INPUT[0] * np.sin(FAN_TRIM_INPUT[1])
    c = p["aero"]

    def physical(xs):
        return FAN_TRIM_STATE + inv_scale * np.asarray(xs)

    def drift_phys(xp):
        # physical derivative with (u_c, u_s) = 0
        v, gam, beta, dbeta, h = (xp[..., i] for i in range(5))
        alpha = beta - gam
        D, L, M = fan_aero(p, v, alpha)
        out = np.empty(np.shape(xp))
        out[..., 0] = (-D - W * np.sin(gam)) / m
        out[..., 1] = (L - W * np.cos(gam)) / (m * v)
        out[..., 2] = dbeta
        out[..., 3] = M / J
        out[..., 4] = v * np.sin(gam)
        return out

    def gmat_phys(xp):
        v, gam, beta = xp[..., 0], xp[..., 1], xp[..., 2]
        alpha = beta - gam
        g = np.zeros(np.shape(xp)[:-1] + (5, 2))
        g[..., 0, 0] = np.cos(alpha) / m
        g[..., 0, 1] = -np.sin(alpha) / m
        g[..., 1, 0] = np.sin(alpha) / (m * v)
        g[..., 1, 1] = np.cos(alpha) / (m * v)
        g[..., 3, 1] = -lT / J
        return g

    trim_in = np.array([uc0, us0])

    def input_matrix(xs):
        return scale[:, None] * gmat_phys(physical(xs))

    def drift(xs):
        xp = physical(xs)
        return scale * (drift_phys(xp) + np.einsum("...ij,j->...i", gmat_phys(xp), trim_in))

    def rhs(xs, w):
        xp = physical(xs)
        w = np.asarray(w)
        uc = w[..., 0] + uc0
        us = w[..., 1] + us0
        v, gam, beta, dbeta, h = (xp[..., i] for i in range(5))
        alpha = beta - gam
        ca, sa = np.cos(alpha), np.sin(alpha)
        q = v * v
        D = q * (c["drag"][0] + c["drag"][1] * alpha * alpha)
        L = q * (c["lift"][0] + c["lift"][1] * alpha)
        M = q * (c["moment"][0] + c["moment"][1] * alpha)
        shape = np.broadcast_shapes(np.shape(xs), np.shape(uc) + (5,))
        out = np.empty(shape)
        out[..., 0] = scale[0] * (-D - W * np.sin(gam) + uc * ca - us * sa) / m
        out[..., 1] = (L - W * np.cos(gam) + uc * sa + us * ca) / (m * v)
        out[..., 2] = dbeta
        out[..., 3] = (M - lT * us) / J
        out[..., 4] = v * np.sin(gam)
        return out

    def jacobian(xs, w):
        xp = physical(xs)
        w = np.asarray(w)
        uc = w[..., 0] + uc0
        us = w[..., 1] + us0
        v, gam, beta, dbeta, h = (xp[..., i] for i in range(5))
        alpha = beta - gam
        ca, sa = np.cos(alpha), np.sin(alpha)
        q = v * v
        cd, cl, cm = c["drag"], c["lift"], c["moment"]
        L = q * (cl[0] + cl[1] * alpha)
        dD_dv, dD_da = 2 * v * (cd[0] + cd[1] * alpha * alpha), q * 2 * cd[1] * alpha
        dL_dv, dL_da = 2 * v * (cl[0] + cl[1] * alpha), q * cl[1]
        dM_dv, dM_da = 2 * v * (cm[0] + cm[1] * alpha), q * cm[1]
        lead = np.broadcast_shapes(np.shape(xs)[:-1], np.shape(uc))
        # physical Jacobian, columns (v, gam, beta, dbeta, h); alpha = beta - gam
        Ap = np.zeros(lead + (5, 5))
        fv_a = (-dD_da - uc * sa - us * ca) / m
        Ap[..., 0, 0] = -dD_dv / m
        Ap[..., 0, 1] = -W * np.cos(gam) / m - fv_a
        Ap[..., 0, 2] = fv_a
        num = L - W * np.cos(gam) + uc * sa + us * ca
        fg_a = (dL_da + uc * ca - us * sa) / (m * v)
        Ap[..., 1, 0] = dL_dv / (m * v) - num / (m * v * v)
        Ap[..., 1, 1] = W * np.sin(gam) / (m * v) - fg_a
        Ap[..., 1, 2] = fg_a
        Ap[..., 2, 3] = 1.0
        Ap[..., 3, 0] = dM_dv / J
        Ap[..., 3, 1] = -dM_da / J
        Ap[..., 3, 2] = dM_da / J
        Ap[..., 4, 0] = np.sin(gam)
        Ap[..., 4, 1] = v * np.cos(gam)
        A = scale[:, None] * Ap * inv_scale[None, :]
        Bp = gmat_phys(np.broadcast_to(xp, lead + (5,)))
        B = scale[:, None] * Bp
        return A, B

    hw = np.asarray(input_half_widths, dtype=float)
    return PlantModel(
        name="ducted_fan",
        state_dim=5,
        input_dim=2,
        rhs=rhs,
        state_box=Box.symmetric([2.0, 1.5, 1.5, 4.0, 3.0]),
        input_box=Box.symmetric(hw),
        initial_box=Box.symmetric([0.5] * 5),
        goal_box=Box.symmetric([0.2] * 5),
        drift=drift,
        input_matrix=input_matrix,
        jacobian=jacobian,
        state_names=("v", "gamma", "beta", "dbeta", "h"),
        input_names=("du_c", "du_s"),
        params={"fan": p, "trim_input_cs": [float(uc0), float(us0)]},
    )


def fan_scaled_to_physical(xs, w):
    """Map scaled state/input back to physical state and (thrust, angle)."""
    xp = FAN_TRIM_STATE + np.asarray(xs) / FAN_STATE_SCALE
    uc0 = FAN_TRIM_INPUT[0] * np.cos(FAN_TRIM_INPUT[1])
    us0 = FAN_TRIM_INPUT[0] * np.sin(FAN_TRIM_INPUT[1])
    w = np.asarray(w)
    uc, us = w[..., 0] + uc0, w[..., 1] + us0
    return xp, np.hypot(uc, us), np.arctan2(us, uc)


def scalar_integrator_model(input_bound: float = 10.0, state_bound: float = 10.0) -> PlantModel:
    """``xdot = u`` on the real line; used by the closed-form checks."""

    def rhs(x, u):
        return np.asarray(u, dtype=float) + 0.0 * np.asarray(x)

    def jacobian(x, u):
        lead = np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1])
        return np.zeros(lead + (1, 1)), np.ones(lead + (1, 1))

    return PlantModel(
        name="integrator",
        state_dim=1,
        input_dim=1,
        rhs=rhs,
        state_box=Box.symmetric([state_bound]),
        input_box=Box.symmetric([input_bound]),
        initial_box=Box.symmetric([1.0]),
        goal_box=Box.symmetric([0.1]),
        drift=lambda x: np.zeros(np.shape(x)),
        input_matrix=lambda x: np.ones(np.shape(x)[:-1] + (1, 1)),
        jacobian=jacobian,
    )


def build_plant(spec: dict) -> PlantModel:
    """Construct a plant from a config ``plant`` section."""
    kind = spec.get("kind")
    if kind == "car":
        return car_model(int(spec.get("num_cars", 1)))
    if kind == "ducted_fan":
        params = load_fan_params(spec.get("param_file"))
        hw = spec.get("input_half_widths", (3.0, 1.5))
        return ducted_fan_model(params, hw)
    if kind == "integrator":
        return scalar_integrator_model()
    raise ValueError(f"unknown plant kind {kind!r}")
