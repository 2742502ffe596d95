"""Receding-horizon MPC demonstrator.

The finite-horizon problem is solved by single shooting over the stacked
input sequence (the state trajectory is the RK4 rollout). A box-constrained
iLQR sweep does the global work and a projected Newton iteration with an
exact-gradient, finite-difference Hessian finishes to the gradient
tolerance. Problems are solved in batches so that multistart guesses,
finite-difference probes and multi-trace rollouts share the Python overhead.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import solve_discrete_are
from scipy.optimize import linprog

from .dynamics import PlantModel, rk4_step, rk4_step_jacobian

log = logging.getLogger(__name__)


class DemonstratorError(RuntimeError):
    """The demonstrator could not produce a usable demonstration."""


class EmptyPolytopeError(ValueError):
    pass


SEED_KINDS = ("lqr", "zero", "half", "random")
RANDOM_SEED_STREAM = 20240611  # fixed: the "random" seeds are the same for every solve
POLISH_ITER = 25  # Newton finishing steps; more never helped once iLQR has converged


@dataclass(frozen=True)
class MpcConfig:
    """Horizon, step and diagonal quadratic weights of the MPC problem.

    ``running_weights`` is ``Q'`` over the stacked vector ``[u, x]`` (inputs
    first), ``terminal_weights`` is ``H'`` over ``x``. ``seeds`` picks the cold
    initial guesses (see ``cold_starts``); the problem has many local minima
    and the seed decides which one a cold solve lands in. ``grad_tol`` is
    relative: a solve has converged when the projected gradient is below
    ``grad_tol * (1 + |grad J|_inf)``.
    """

    horizon: int
    dt: float
    running_weights: tuple
    terminal_weights: tuple
    lam: float = 0.5
    fd_step: float = 1e-4
    grad_tol: float = 1e-6
    max_iter: int = 100
    decrease_margin: float = 0.0
    seeds: tuple = ("lqr", "random")
    random_seeds: int = 16

    def __post_init__(self):
        object.__setattr__(self, "running_weights", tuple(float(w) for w in self.running_weights))
        object.__setattr__(self, "terminal_weights", tuple(float(w) for w in self.terminal_weights))
        if int(self.horizon) < 1:
            raise ValueError("horizon N must be >= 1")
        if not self.dt > 0:
            raise ValueError("MPC step must be positive")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")
        if min(self.running_weights + self.terminal_weights) < 0:
            raise ValueError("cost weights must be non-negative")
        if not self.fd_step > 0:
            raise ValueError("finite-difference step must be positive")
        object.__setattr__(self, "seeds", tuple(self.seeds))
        bad = set(self.seeds) - set(SEED_KINDS)
        if bad or not self.seeds:
            raise ValueError(f"seeds must be a non-empty subset of {SEED_KINDS}, got {self.seeds}")
        if int(self.random_seeds) < 0:
            raise ValueError("random_seeds must be >= 0")
        if not self.grad_tol > 0 or int(self.max_iter) < 1:
            raise ValueError("grad_tol must be positive and max_iter >= 1")

    def weights(self, model: PlantModel):
        m, n = model.input_dim, model.state_dim
        q = np.asarray(self.running_weights)
        h = np.asarray(self.terminal_weights)
        if q.size != m + n or h.size != n:
            raise ValueError(
                f"weights do not match plant: |Q'|={q.size} (need {m + n}), |H'|={h.size} (need {n})"
            )
        return q[:m], q[m:], h


@dataclass
class ControlPolytope:
    """``{u | A u <= b}`` with an interior point found by a Chebyshev LP."""

    A: np.ndarray
    b: np.ndarray
    interior_point: np.ndarray = field(init=False)
    radius: float = field(init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b row counts differ")
        self.interior_point, self.radius = chebyshev_center(self.A, self.b, cap=1.0)
        if self.radius < 0:
            raise EmptyPolytopeError("control polytope is empty")

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def residual(self, u) -> np.ndarray:
        return self.A @ np.asarray(u) - self.b

    def contains(self, u, tol: float = 1e-8) -> bool:
        return bool(np.all(self.residual(u) <= tol))

    def vertices(self) -> np.ndarray:
        """Enumerate vertices by brute force over row pairs (2-D inputs only)."""
        if self.dim == 1:
            cands = [np.array([self.b[i] / self.A[i, 0]]) for i in range(len(self.b))
                     if abs(self.A[i, 0]) > 1e-14]
        elif self.dim == 2:
            cands = []
            r = len(self.b)
            for i in range(r):
                for j in range(i + 1, r):
                    M = self.A[[i, j]]
                    if abs(np.linalg.det(M)) < 1e-12:
                        continue
                    cands.append(np.linalg.solve(M, self.b[[i, j]]))
        else:
            raise NotImplementedError("vertex enumeration only for m <= 2")
        pts = [p for p in cands if np.all(self.A @ p <= self.b + 1e-9)]
        return np.array(pts)


def chebyshev_center(A: np.ndarray, b: np.ndarray, cap: Optional[float] = None):
    """Largest inscribed ball ``(center, radius)``; radius < 0 means empty.

    ``cap`` bounds the radius so unbounded polyhedra still give a finite LP.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    norms = np.linalg.norm(A, axis=1)
    k = A.shape[1]
    c = np.zeros(k + 1)
    c[-1] = -1.0
    A_ub = np.hstack([A, norms[:, None]])
    bounds = [(None, None)] * k + [(None, cap)]
    res = linprog(c, A_ub=A_ub, b_ub=b, bounds=bounds, method="highs")
    if res.status == 2:
        return np.full(k, np.nan), -np.inf
    if res.status != 0:
        raise RuntimeError(f"Chebyshev LP failed: {res.message}")
    return res.x[:k], float(res.x[-1])


# ---------------------------------------------------------------------------
# finite-horizon problem


@dataclass
class MpcSolution:
    inputs: np.ndarray       # (B, N, m)
    value: np.ndarray        # (B,)
    states: np.ndarray       # (B, N+1, n)
    converged: np.ndarray    # (B,) bool
    iterations: int

    @property
    def degraded(self) -> np.ndarray:
        return ~self.converged


def rollout(model: PlantModel, x0: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    """Open-loop RK4 rollout; ``x0`` is ``(B, n)``, ``U`` is ``(B, N, m)``."""
    B, N, _ = U.shape
    X = np.empty((B, N + 1, model.state_dim))
    X[:, 0] = x0
    with np.errstate(all="ignore"):
        for k in range(N):
            X[:, k + 1] = rk4_step(model.rhs, X[:, k], U[:, k], dt)
    return X


def trajectory_cost(X: np.ndarray, U: np.ndarray, ru, qx, h) -> np.ndarray:
    """``sum_j u_j' Ru u_j + x_j' Qx x_j  +  x_N' H x_N`` for each batch row."""
    run = (U * U * ru).sum(axis=(1, 2)) + (X[:, :-1] ** 2 * qx).sum(axis=(1, 2))
    return run + (X[:, -1] ** 2 * h).sum(axis=1)


def _linearize(model: PlantModel, x0, U, dt):
    B, N, m = U.shape
    n = model.state_dim
    X = np.empty((B, N + 1, n))
    X[:, 0] = x0
    Ads = np.empty((B, N, n, n))
    Bds = np.empty((B, N, n, m))
    with np.errstate(all="ignore"):
        for k in range(N):
            X[:, k + 1], Ads[:, k], Bds[:, k] = rk4_step_jacobian(model, X[:, k], U[:, k], dt)
    return X, Ads, Bds


def _value_and_grad(model: PlantModel, x0, U, dt, ru, qx, h):
    """Cost and its exact input gradient (adjoint sweep) for each batch row."""
    B, N, m = U.shape
    X, Ads, Bds = _linearize(model, x0, U, dt)
    with np.errstate(all="ignore"):
        cost = trajectory_cost(X, U, ru, qx, h)
        grad = np.empty((B, N, m))
        lam = 2.0 * h * X[:, N]
        for k in range(N - 1, -1, -1):
            grad[:, k] = 2.0 * ru * U[:, k] + np.einsum("bnm,bn->bm", Bds[:, k], lam)
            lam = 2.0 * qx * X[:, k] + np.einsum("bnk,bn->bk", Ads[:, k], lam)
    return cost, grad.reshape(B, N * m), X


def _newton_model(model: PlantModel, x0, U, dt, ru, qx, h, eps: float = 1e-6):
    """Cost, gradient and a finite-difference Hessian of the gradient."""
    B, N, m = U.shape
    p = N * m
    Uf = U.reshape(B, p)
    pert = Uf[:, None, :] + eps * np.eye(p)[None]
    allU = np.concatenate([Uf[:, None, :], pert], axis=1).reshape(B * (p + 1), N, m)
    allx = np.repeat(x0, p + 1, axis=0)
    cost, grad, X = _value_and_grad(model, allx, allU, dt, ru, qx, h)
    grad = grad.reshape(B, p + 1, p)
    hess = (grad[:, 1:, :] - grad[:, :1, :]) / eps
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    return cost.reshape(B, p + 1)[:, 0], grad[:, 0], hess, X.reshape(B, p + 1, N + 1, -1)[:, 0]


def _projected_gradient(U, grad, lb, ub):
    return np.abs(U - np.clip(U - grad, lb, ub)).max(axis=1)


def _solve(H, r):
    """Batched ``H^{-1} r``; falls back to the pseudo-inverse for rows that
    lost definiteness to rounding (huge curvature far from the optimum)."""
    try:
        return np.linalg.solve(H, r)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(H) @ r


def _box_qp(H, g, lo, hi, iters: int = 25):
    """Batched ``min 0.5 d'Hd + g'd`` over ``lo <= d <= hi`` (H positive definite).

    Projected Newton on the free set. Returns the minimizer, the free mask and
    the free-block Newton matrix (identity rows on clamped coordinates).
    """
    B, m = g.shape
    eye = np.eye(m)
    d = np.clip(np.zeros_like(g), lo, hi)

    def newton_matrix(rows):
        y, Hr = d[rows], H[rows]
        gr = g[rows] + np.einsum("bij,bj->bi", Hr, y)
        clamped = ((y <= lo[rows]) & (gr > 0)) | ((y >= hi[rows]) & (gr < 0))
        free = ~clamped
        Hm = np.where(free[:, :, None] & free[:, None, :], Hr, 0.0) + eye * clamped[:, :, None]
        return gr, free, Hm

    todo = np.arange(B)
    for _ in range(iters):
        gr, free, Hm = newton_matrix(todo)
        step = -_solve(Hm, np.where(free, gr, 0.0)[..., None])[..., 0]
        small = np.abs(step).max(axis=1) < 1e-13
        todo, gr, step = todo[~small], gr[~small], step[~small]
        if todo.size == 0:
            break
        dt_ = d[todo]
        Hs, gs, los, his = H[todo], g[todo], lo[todo], hi[todo]
        f0 = 0.5 * np.einsum("bi,bij,bj->b", dt_, Hs, dt_) + (gs * dt_).sum(axis=1)
        alpha = np.ones(todo.size)
        accepted = np.zeros(todo.size, dtype=bool)
        for _ls in range(30):
            cand = np.clip(dt_ + alpha[:, None] * step, los, his)
            fc = 0.5 * np.einsum("bi,bij,bj->b", cand, Hs, cand) + (gs * cand).sum(axis=1)
            ok = ~accepted & (fc <= f0 + 1e-4 * (gr * (cand - dt_)).sum(axis=1) + 1e-15 * np.abs(f0))
            dt_[ok] = cand[ok]
            accepted |= ok
            if accepted.all():
                break
            alpha[~accepted] *= 0.5
        d[todo] = dt_
        todo = todo[accepted]
        if todo.size == 0:
            break
    _, free, Hm = newton_matrix(np.arange(B))
    return d, free, Hm


def _ilqr(cfg: MpcConfig, model: PlantModel, x0, U, lb, ub, max_iter: int):
    # overflow in far-off starts is handled row by row inside
    with np.errstate(over="ignore", invalid="ignore"):
        return _ilqr_sweeps(cfg, model, x0, U, lb, ub, max_iter)


def _ilqr_sweeps(cfg: MpcConfig, model: PlantModel, x0, U, lb, ub, max_iter: int):
    """Box-constrained iLQR (Gauss-Newton DDP) on a batch of problems.

    The backward pass solves a small box QP per stage; the forward pass
    applies the feedback gains with a backtracking step on the feedforward
    term. Stops when a full sweep no longer lowers the cost noticeably.
    """
    ru, qx, h = cfg.weights(model)
    dt = cfg.dt
    B, N, m = U.shape
    n = model.state_dim
    Rd, Qd = np.diag(2.0 * ru), np.diag(2.0 * qx)
    mu = np.full(B, 1e-6)
    X = rollout(model, x0, U, dt)
    with np.errstate(all="ignore"):
        J = trajectory_cost(X, U, ru, qx, h)
    # starts whose rollout blows up are left alone; they lose the multistart vote
    todo = np.flatnonzero(np.isfinite(J))
    for _ in range(max_iter):
        if todo.size == 0:
            break
        Ut, Xt = U[todo], X[todo]
        _, A, Bm = _linearize(model, x0[todo], Ut, dt)
        b = todo.size
        Vx = 2.0 * h * Xt[:, N]
        Vxx = np.broadcast_to(np.diag(2.0 * h), (b, n, n)).copy()
        kff = np.empty((b, N, m))
        Kfb = np.empty((b, N, m, n))
        expected = np.zeros(b)
        broken = np.zeros(b, dtype=bool)
        for k in range(N - 1, -1, -1):
            At, Bt = np.swapaxes(A[:, k], 1, 2), np.swapaxes(Bm[:, k], 1, 2)
            Qx = 2.0 * qx * Xt[:, k] + np.einsum("bij,bj->bi", At, Vx)
            Qu = 2.0 * ru * Ut[:, k] + np.einsum("bij,bj->bi", Bt, Vx)
            Qxx = Qd + At @ Vxx @ A[:, k]
            Quu = Rd + Bt @ Vxx @ Bm[:, k]
            Qux = Bt @ Vxx @ A[:, k]
            Quu = 0.5 * (Quu + np.swapaxes(Quu, 1, 2))
            Qreg = Quu + mu[todo][:, None, None] * np.eye(m)
            sick = ~(np.isfinite(Qreg).all(axis=(1, 2)) & np.isfinite(Qu).all(axis=1)
                     & np.isfinite(Qux).all(axis=(1, 2)))
            if sick.any():
                # overflow in the expansion: freeze the row, it keeps its current plan
                broken |= sick
                Qreg[sick], Qu[sick], Qux[sick] = np.eye(m), 0.0, 0.0
            du, free, Hm = _box_qp(Qreg, Qu, lb - Ut[:, k], ub - Ut[:, k])
            K = -_solve(Hm, np.where(free[:, :, None], Qux, 0.0))
            kff[:, k], Kfb[:, k] = du, K
            expected += (du * Qu).sum(axis=1) + 0.5 * np.einsum("bi,bij,bj->b", du, Quu, du)
            KtQuu = np.swapaxes(K, 1, 2) @ Quu
            Vx = (Qx + np.einsum("bij,bj->bi", KtQuu, du) + np.einsum("bji,bj->bi", K, Qu)
                  + np.einsum("bji,bj->bi", Qux, du))
            Vxx = Qxx + KtQuu @ K + np.swapaxes(K, 1, 2) @ Qux + np.swapaxes(Qux, 1, 2) @ K
            Vxx = 0.5 * (Vxx + np.swapaxes(Vxx, 1, 2))
        alpha = np.ones(b)
        accepted = broken.copy()
        newU, newX, newJ = Ut.copy(), Xt.copy(), J[todo].copy()
        for _ls in range(12):
            pend = np.flatnonzero(~accepted)
            if pend.size == 0:
                break
            Xc = np.empty((pend.size, N + 1, n))
            Uc = np.empty((pend.size, N, m))
            Xc[:, 0] = x0[todo[pend]]
            with np.errstate(all="ignore"):
                for k in range(N):
                    dx = Xc[:, k] - Xt[pend, k]
                    Uc[:, k] = np.clip(Ut[pend, k] + alpha[pend, None] * kff[pend, k]
                                       + np.einsum("bij,bj->bi", Kfb[pend, k], dx), lb, ub)
                    Xc[:, k + 1] = rk4_step(model.rhs, Xc[:, k], Uc[:, k], dt)
                Jc = trajectory_cost(Xc, Uc, ru, qx, h)
            gain = J[todo[pend]] - Jc
            ok = np.isfinite(Jc) & (gain >= -1e-4 * alpha[pend] * expected[pend]) & (gain >= 0)
            sel = pend[ok]
            newU[sel], newX[sel], newJ[sel] = Uc[ok], Xc[ok], Jc[ok]
            accepted[sel] = True
            alpha[pend[~ok]] *= 0.5
        drop = J[todo] - newJ
        U[todo], X[todo], J[todo] = newU, newX, newJ
        mu[todo] = np.where(accepted, np.maximum(mu[todo] / 4.0, 1e-9),
                            np.minimum(mu[todo] * 10.0, 1e8))
        stop = (broken | (accepted & (drop <= 1e-10 * (1.0 + J[todo])))
                | (~accepted & (mu[todo] >= 1e8)))
        todo = todo[~stop]
    return U


def _polish(cfg: MpcConfig, model: PlantModel, x0, U, lb, ub, max_iter: int):
    """Projected Newton with a finite-difference Hessian, for the final digits.

    Bertsekas-style epsilon-active set for the box, eigenvalue-modified
    reduced Hessian and an Armijo search along the projection arc.
    Returns ``(U, converged, iterations)``.
    """
    ru, qx, h = cfg.weights(model)
    B, N, m = U.shape
    U = U.reshape(B, N * m).copy()
    converged = np.zeros(B, dtype=bool)
    todo = np.arange(B)
    sigma = 1e-4
    it = 0
    for it in range(1, max_iter + 1):
        Ut = U[todo]
        cost, grad, hess, _ = _newton_model(model, x0[todo], Ut.reshape(-1, N, m), cfg.dt, ru, qx, h)
        if not np.all(np.isfinite(cost)):
            raise DemonstratorError("non-finite MPC rollout")
        pg_norm = _projected_gradient(Ut, grad, lb, ub)
        tol = cfg.grad_tol * (1.0 + np.abs(grad).max(axis=1))
        done = pg_norm <= tol
        converged[todo[done]] = True
        keep = ~done
        todo, Ut, cost, grad, hess, pg_norm, tol = (todo[keep], Ut[keep], cost[keep], grad[keep],
                                                    hess[keep], pg_norm[keep], tol[keep])
        if todo.size == 0:
            break
        eps = np.minimum(0.05, pg_norm)[:, None]
        act = ((Ut <= lb + eps) & (grad > 0)) | ((Ut >= ub - eps) & (grad < 0))
        free = ~act
        Hr = hess * (free[:, :, None] & free[:, None, :])
        # eigenvalue modification keeps the reduced Newton matrix positive definite
        w, V = np.linalg.eigh(Hr)
        floor = 1e-8 * np.maximum(np.abs(w).max(axis=1, keepdims=True), 1e-12)
        w = np.maximum(np.abs(w), floor)
        diag = np.maximum(np.abs(np.diagonal(hess, axis1=1, axis2=2)), floor)
        gr = np.where(free, grad, 0.0)
        d = -np.einsum("bij,bj->bi", V, np.einsum("bji,bj->bi", V, gr) / w)
        d = np.where(free, d, -grad / diag)
        alpha = np.ones(todo.size)
        accepted = np.zeros(todo.size, dtype=bool)
        U_new = Ut.copy()
        for _ in range(40):
            pend = np.flatnonzero(~accepted)
            if pend.size == 0:
                break
            Uc = np.clip(Ut[pend] + alpha[pend, None] * d[pend], lb, ub)
            Xc = rollout(model, x0[todo[pend]], Uc.reshape(-1, N, m), cfg.dt)
            Jc = trajectory_cost(Xc, Uc.reshape(-1, N, m), ru, qx, h)
            pred = (grad[pend] * (Ut[pend] - Uc)).sum(axis=1)
            ok = np.isfinite(Jc) & (cost[pend] - Jc >= sigma * pred)
            accepted[pend[ok]] = True
            U_new[pend[ok]] = Uc[ok]
            alpha[pend[~ok]] *= 0.5
        stalled = ~accepted
        if np.any(stalled):
            # no decrease representable in floating point: stationary to rounding
            tiny = pg_norm[stalled] <= 100.0 * tol[stalled]
            converged[todo[stalled][tiny]] = True
        U[todo] = U_new
        todo = todo[accepted]
        if todo.size == 0:
            break
    return U.reshape(B, N, m), converged, it


def _finish(cfg: MpcConfig, model: PlantModel, x0, U) -> MpcSolution:
    N = int(cfg.horizon)
    lb, ub = model.input_box.lo, model.input_box.hi
    U, converged, it = _polish(cfg, model, x0, U, np.tile(lb, N), np.tile(ub, N),
                               min(cfg.max_iter, POLISH_ITER))
    X = rollout(model, x0, U, cfg.dt)
    value = trajectory_cost(X, U, *cfg.weights(model))
    if not np.all(np.isfinite(value)):
        raise DemonstratorError("non-finite MPC rollout")
    return MpcSolution(U, value, X, converged, it)


def _solve_from(cfg: MpcConfig, model: PlantModel, x0, U0=None) -> MpcSolution:
    """Local solve from one initial guess per problem: iLQR, then Newton polish."""
    x0 = np.array(x0, dtype=float, ndmin=2)
    B = x0.shape[0]
    N, m = int(cfg.horizon), model.input_dim
    lb, ub = model.input_box.lo, model.input_box.hi
    U = np.zeros((B, N, m)) if U0 is None else np.array(U0, dtype=float).reshape(B, N, m)
    U = _ilqr(cfg, model, x0, np.clip(U, lb, ub), lb, ub, cfg.max_iter)
    return _finish(cfg, model, x0, U)


_LQR_CACHE: dict = {}


def lqr_gain(cfg: MpcConfig, model: PlantModel) -> Optional[np.ndarray]:
    """Discrete LQR gain at the goal centre (``None`` if the DARE fails)."""
    key = (id(model), cfg.horizon, cfg.dt, cfg.running_weights, cfg.terminal_weights)
    if key not in _LQR_CACHE:
        ru, qx, _ = cfg.weights(model)
        x_eq = model.goal_box.center
        u_eq = model.input_box.center
        _, Ad, Bd = rk4_step_jacobian(model, x_eq, u_eq, cfg.dt)
        try:
            P = solve_discrete_are(Ad, Bd, np.diag(qx), np.diag(ru))
            K = np.linalg.solve(np.diag(ru) + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
        except (np.linalg.LinAlgError, ValueError):
            K = None
        _LQR_CACHE[key] = K
    return _LQR_CACHE[key]


def cold_starts(cfg: MpcConfig, model: PlantModel, x0: np.ndarray, kinds=None) -> list:
    """Deterministic initial input sequences, in the order of ``kinds``.

    ``lqr``: saturated rollout of the LQR law at the goal centre (falls back
    to ``zero`` when the Riccati equation has no solution); ``zero``: the
    input-box centre; ``half``: per channel, constant inputs at plus and minus
    half the box half-width; ``random``: ``cfg.random_seeds`` sequences drawn
    uniformly from the input box by a fixed generator (identical across calls).
    """
    kinds = cfg.seeds if kinds is None else kinds
    B, N, m = x0.shape[0], int(cfg.horizon), model.input_dim
    uc, hw = model.input_box.center, model.input_box.half_widths
    zero = np.broadcast_to(uc, (B, N, m)).copy()
    starts = []
    for kind in kinds:
        if kind == "zero":
            starts.append(zero)
        elif kind == "lqr":
            K = lqr_gain(cfg, model)
            U = np.empty((B, N, m))
            if K is not None:
                x = x0.copy()
                xc = model.goal_box.center
                with np.errstate(all="ignore"):
                    for k in range(N):
                        U[:, k] = model.input_box.clip(uc - (x - xc) @ K.T)
                        x = rk4_step(model.rhs, x, U[:, k], cfg.dt)
            starts.append(U if K is not None and np.all(np.isfinite(U)) else zero)
        elif kind == "random":
            draws = np.random.default_rng(RANDOM_SEED_STREAM).uniform(
                model.input_box.lo, model.input_box.hi, (cfg.random_seeds, N, m))
            starts.extend(np.broadcast_to(d, (B, N, m)).copy() for d in draws)
        elif kind == "half":
            for j in range(m):
                for sgn in (-0.5, 0.5):
                    u = uc.copy()
                    u[j] += sgn * hw[j]
                    starts.append(np.broadcast_to(u, (B, N, m)).copy())
        else:
            raise ValueError(f"unknown seed kind {kind!r}")
    return starts


def solve_mpc_batch(cfg: MpcConfig, model: PlantModel, x0, U0=None,
                    multistart: Optional[bool] = None, seeds=None) -> MpcSolution:
    """Solve a batch of MPC problems from states ``x0`` (shape ``(B, n)``).

    Returns local minimizers with the input box enforced exactly. With
    ``multistart`` the cold starts (``seeds``, default ``cfg.seeds``) are tried
    alongside ``U0`` and the one with the lowest iLQR value is polished (ties
    keep the earlier start); it defaults to on when no warm start is given.
    """
    x0 = np.array(x0, dtype=float, ndmin=2)
    B = x0.shape[0]
    if multistart is None:
        multistart = U0 is None
    starts = [] if U0 is None else [np.array(U0, dtype=float).reshape(B, cfg.horizon, -1)]
    if multistart or not starts:
        starts += cold_starts(cfg, model, x0, seeds)
    S = len(starts)
    # iLQR on all starts in one stacked batch, then polish only the winners
    xs = np.tile(x0, (S, 1))
    lb, ub = model.input_box.lo, model.input_box.hi
    U = _ilqr(cfg, model, xs, np.clip(np.concatenate(starts), lb, ub), lb, ub, cfg.max_iter)
    X = rollout(model, xs, U, cfg.dt)
    with np.errstate(all="ignore"):
        value = trajectory_cost(X, U, *cfg.weights(model)).reshape(S, B)
    value = np.where(np.isfinite(value), value, np.inf)
    best = np.argmin(value, axis=0)
    return _finish(cfg, model, x0, U[best * B + np.arange(B)])


def solve_mpc(cfg: MpcConfig, model: PlantModel, x, warm_start=None, multistart: bool = True):
    """Single-state MPC solve: ``(u_sequence (N, m), V*, converged)``."""
    U0 = None if warm_start is None else np.asarray(warm_start)[None]
    sol = solve_mpc_batch(cfg, model, np.asarray(x, dtype=float)[None], U0, multistart)
    return sol.inputs[0], float(sol.value[0]), bool(sol.converged[0])


def shift_inputs(U: np.ndarray) -> np.ndarray:
    """Receding-horizon warm start: drop the first input, repeat the last."""
    return np.concatenate([U[..., 1:, :], U[..., -1:, :]], axis=-2)


# ---------------------------------------------------------------------------
# value gradient and feasible inputs


def value_gradient(cfg: MpcConfig, model: PlantModel, x, nominal_inputs=None,
                   step: Optional[float] = None) -> np.ndarray:
    """Central finite-difference estimate of ``grad V*(x)``.

    Each probe re-solves the MPC warm-started from the nominal solution. A
    degraded probe widens the step tenfold once before giving up.
    """
    x = np.asarray(x, dtype=float)
    n = model.state_dim
    if nominal_inputs is None:
        nominal_inputs, _, _ = solve_mpc(cfg, model, x)
    hstep = cfg.fd_step if step is None else step
    for attempt in range(2):
        probes = np.concatenate([x + hstep * np.eye(n), x - hstep * np.eye(n)])
        warm = np.broadcast_to(nominal_inputs, (2 * n,) + np.shape(nominal_inputs))
        sol = solve_mpc_batch(cfg, model, probes, warm, multistart=False)
        if np.all(sol.converged):
            return (sol.value[:n] - sol.value[n:]) / (2.0 * hstep)
        log.debug("degraded gradient probe at %s (h=%g)", x, hstep)
        hstep *= 10.0
    raise DemonstratorError(f"value gradient probes did not converge at x={x}")


@dataclass
class Demonstration:
    x: np.ndarray
    u_star: np.ndarray
    value: float
    grad: np.ndarray
    polytope: ControlPolytope
    decrease: float          # grad V* . F(x, u*)
    u_sequence: np.ndarray
    degraded: bool = False

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "u_star": self.u_star.tolist(),
            "value": self.value,
            "grad": self.grad.tolist(),
            "decrease": self.decrease,
            "A": self.polytope.A.tolist(),
            "b": self.polytope.b.tolist(),
            "degraded": self.degraded,
        }


def feasible_set(cfg: MpcConfig, model: PlantModel, x, warm_start=None) -> Demonstration:
    """Demonstration at ``x``: ``u*``, ``V*``, ``grad V*`` and the input polytope
    ``{u in U | grad V . F(x,u) <= lam * grad V . F(x,u*)}``.
    """
    if not model.control_affine:
        raise DemonstratorError("feasible_set requires a control-affine plant")
    x = np.asarray(x, dtype=float)
    U, value, ok = solve_mpc(cfg, model, x, warm_start)
    grad = value_gradient(cfg, model, x, nominal_inputs=U)
    u_star = U[0]
    fx = model.drift(x)
    gx = model.input_matrix(x)
    decrease = float(grad @ model.rhs(x, u_star))
    if not decrease < 0:
        raise DemonstratorError(
            f"demonstrator not decreasing at x={x.tolist()} (grad V . F = {decrease:.3e})"
        )
    a = gx.T @ grad
    c = cfg.lam * decrease - grad @ fx
    m = model.input_dim
    A = np.vstack([a[None, :], np.eye(m), -np.eye(m)])
    b = np.concatenate([[c], model.input_box.hi, -model.input_box.lo])
    return Demonstration(x.copy(), u_star.copy(), value, grad, ControlPolytope(A, b),
                         decrease, U, degraded=not ok)


# ---------------------------------------------------------------------------
# demonstrator in closed loop


@dataclass
class DemoTrace:
    states: np.ndarray
    inputs: np.ndarray
    values: np.ndarray
    reached: bool
    degraded: np.ndarray
    plans: list = field(default_factory=list)


def run_demonstrator(cfg: MpcConfig, model: PlantModel, x0, max_steps: int,
                     keep_plans: bool = False) -> list:
    """Receding-horizon closed loop from each row of ``x0``.

    Every ``dt`` the MPC is re-solved (warm-started from the shifted previous
    plan) and its first input applied with an RK4 step. Should a warm solve
    fail to lower ``V*`` by ``decrease_margin``, every seed kind is tried as
    well and the best plan kept. Traces stop at the first state inside the
    goal box.
    """
    x0 = np.array(x0, dtype=float, ndmin=2)
    B = x0.shape[0]
    m = model.input_dim
    states = [[x] for x in x0]
    inputs = [[] for _ in range(B)]
    values = [[] for _ in range(B)]
    degraded = [[] for _ in range(B)]
    plans = [[] for _ in range(B)]
    reached = np.asarray(model.goal_box.contains(x0), dtype=bool).copy()
    active = np.flatnonzero(~reached)
    x = x0[active]
    U = None
    prev = None
    for _ in range(max_steps):
        if active.size == 0:
            break
        sol = solve_mpc_batch(cfg, model, x, U, multistart=U is None)
        if prev is not None:
            bad = np.flatnonzero((sol.value > prev - cfg.decrease_margin) | ~sol.converged)
            if bad.size:
                alt = solve_mpc_batch(cfg, model, x[bad], U[bad], multistart=True,
                                      seeds=SEED_KINDS)
                better = alt.value < sol.value[bad]
                for attr in ("inputs", "value", "states", "converged"):
                    getattr(sol, attr)[bad[better]] = getattr(alt, attr)[better]
        u0 = sol.inputs[:, 0]
        x_next = rk4_step(model.rhs, x, u0, cfg.dt)
        for j, i in enumerate(active):
            inputs[i].append(u0[j])
            values[i].append(sol.value[j])
            degraded[i].append(not sol.converged[j])
            states[i].append(x_next[j])
            if keep_plans:
                plans[i].append(sol.inputs[j])
        hit = model.goal_box.contains(x_next)
        reached[active[hit]] = True
        active = active[~hit]
        x = x_next[~hit]
        U = shift_inputs(sol.inputs[~hit])
        prev = sol.value[~hit]
    out = []
    for i in range(B):
        out.append(DemoTrace(np.array(states[i]), np.array(inputs[i]).reshape(-1, m),
                             np.array(values[i]), bool(reached[i]),
                             np.array(degraded[i], dtype=bool), plans[i]))
    return out


@dataclass
class DemoCheckReport:
    samples: int
    reached: int
    violations: int
    worst_increase: float
    details: list

    def summary(self) -> str:
        return (f"{self.violations} decrease violations / {self.samples} samples "
                f"({self.reached} reached the goal)")


def demo_check(cfg: MpcConfig, model: PlantModel, rng: np.random.Generator,
               samples: int = 20, max_steps: int = 200) -> DemoCheckReport:
    """Sanity check for cost tuning: along demonstrator traces from random
    initial states, ``V*`` must drop by at least ``decrease_margin`` each step
    while outside the goal's interior, and every trace must reach the goal.
    """
    x0 = model.initial_box.sample(rng, samples)
    traces = run_demonstrator(cfg, model, x0, max_steps)
    violations = 0
    worst = -np.inf
    details = []
    for tr in traces:
        v = tr.values
        if v.size >= 2:
            outside = ~model.goal_box.interior_contains(tr.states[:len(v) - 1])
            diffs = np.diff(v)[outside]
            if diffs.size:
                worst = max(worst, float(diffs.max()))
            bad = int(np.sum(diffs > -cfg.decrease_margin))
        else:
            bad = 0
        bad += 0 if tr.reached else 1
        violations += int(bad > 0)
        details.append({"x0": tr.states[0].tolist(), "steps": len(tr.inputs),
                        "reached": tr.reached, "violations": bad})
    return DemoCheckReport(samples, sum(t.reached for t in traces), violations, worst, details)
