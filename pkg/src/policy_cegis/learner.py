"""Parameter polyhedron and its maximum-volume inscribed ellipsoid.

The learner keeps the set of coefficient vectors compatible with every
demonstration collected so far and proposes the centre of the largest
ellipsoid inside it.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .mpc import ControlPolytope, chebyshev_center
from .policy import BasisSet, eval_basis

log = logging.getLogger(__name__)

BOX_ROW = -1


class MveError(RuntimeError):
    """The interior-point solver failed twice; ``rows`` holds the polyhedron."""

    def __init__(self, msg: str, C: np.ndarray, d: np.ndarray):
        super().__init__(msg)
        self.C = C
        self.d = d

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"C": self.C.tolist(), "d": self.d.tolist(), "error": str(self)}, fh)


@dataclass
class SampleSet:
    """Ordered demonstrations ``(x_j, U_j)``; states must be pairwise distinct."""

    states: list = field(default_factory=list)
    polytopes: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    def add(self, x, U: ControlPolytope) -> int:
        x = np.asarray(x, dtype=float).copy()
        for s in self.states:
            if np.array_equal(s, x):
                raise ValueError(f"duplicate sample state {x.tolist()}")
        self.states.append(x)
        self.polytopes.append(U)
        return len(self.states) - 1


@dataclass(frozen=True)
class ParamPolyhedron:
    """``{theta | C theta <= d}``; ``source[i]`` is the sample index of row
    ``i`` or ``BOX_ROW`` for the ``[-delta, delta]^K`` rows."""

    C: np.ndarray
    d: np.ndarray
    source: np.ndarray
    delta: float

    @classmethod
    def box(cls, K: int, delta: float) -> "ParamPolyhedron":
        if not delta > 0:
            raise ValueError("box half-width must be positive")
        eye = np.eye(K)
        return cls(np.vstack([eye, -eye]), np.full(2 * K, float(delta)),
                   np.full(2 * K, BOX_ROW), float(delta))

    @property
    def K(self) -> int:
        return self.C.shape[1]

    @property
    def num_rows(self) -> int:
        return self.C.shape[0]

    def residual(self, theta) -> np.ndarray:
        return self.C @ np.asarray(theta, dtype=float) - self.d

    def rows_for(self, sample: int) -> np.ndarray:
        return np.flatnonzero(self.source == sample)

    def to_dict(self) -> dict:
        return {"C": self.C.tolist(), "d": self.d.tolist(),
                "source": self.source.tolist(), "delta": self.delta}


def _is_box_row(a: np.ndarray, b: float, box) -> bool:
    nz = np.flatnonzero(a)
    if nz.size != 1 or abs(abs(a[nz[0]]) - 1.0) > 1e-12:
        return False
    j = nz[0]
    bound = box.hi[j] if a[j] > 0 else -box.lo[j]
    return abs(b - bound) <= 1e-12 * max(1.0, abs(bound))


def compatibility_rows(U: ControlPolytope, input_box=None):
    """Rows ``(G, h)`` on the raw policy output ``r`` used by the learner.

    Without ``input_box`` this is ``U`` itself. With it, the policy is taken to
    be saturated onto the box, and each non-box row ``a . u <= c`` becomes
    ``sum_i max(a_i r_i, a_i e_i) <= c``, ``e_i`` the box bound minimising
    ``a_i u_i``. Since ``a_i clip(r_i) <= max(a_i r_i, a_i e_i)`` this implies
    ``clip(r)`` lies in ``U``, while letting ``r`` leave the box on the side
    where clamping only helps. The max-sum is expanded into one row per
    non-empty subset of the channels with ``a_i != 0``. Box rows of ``U`` are
    dropped (the clamp enforces them).
    """
    if input_box is None:
        return U.A, U.b
    G, h = [], []
    for a, c in zip(U.A, U.b):
        if _is_box_row(a, c, input_box):
            continue
        nz = np.flatnonzero(a)
        e = np.where(a > 0, input_box.lo, input_box.hi)
        for r in range(1, nz.size + 1):
            for S in itertools.combinations(nz, r):
                row = np.zeros_like(a)
                row[list(S)] = a[list(S)]
                rest = np.setdiff1d(nz, S)
                G.append(row)
                h.append(c - float(a[rest] @ e[rest]))
    if not G:
        return np.zeros((0, U.A.shape[1])), np.zeros(0)
    return np.array(G), np.array(h)


def add_sample(poly: ParamPolyhedron, basis: BasisSet, x, U: ControlPolytope,
               sample_index: int, input_box=None) -> ParamPolyhedron:
    """Append ``(G Phi(x)) theta <= h`` for the demonstration ``(x, U)``, with
    ``(G, h) = compatibility_rows(U, input_box)`` (``(A, b)`` when no box)."""
    Phi = eval_basis(basis, x)
    if not np.all(np.isfinite(Phi)):
        raise ValueError("non-finite basis values at sample state")
    G, h = compatibility_rows(U, input_box)
    rows = G @ Phi
    return ParamPolyhedron(
        np.vstack([poly.C, rows]),
        np.concatenate([poly.d, h]),
        np.concatenate([poly.source, np.full(rows.shape[0], sample_index)]),
        poly.delta,
    )


@dataclass(frozen=True)
class Ellipsoid:
    """``{center + B s : |s| <= 1}`` with ``B`` lower triangular."""

    center: np.ndarray
    B: np.ndarray

    @property
    def semi_axes(self) -> np.ndarray:
        return np.linalg.svd(self.B, compute_uv=False)

    @property
    def log_volume(self) -> float:
        """Log volume up to the constant of the unit ball."""
        return float(np.sum(np.log(np.abs(np.diag(self.B)))))

    def containment_residual(self, C: np.ndarray, d: np.ndarray) -> np.ndarray:
        return np.linalg.norm(C @ self.B, axis=1) + C @ self.center - d


@dataclass(frozen=True)
class Center:
    ellipsoid: Ellipsoid
    iterations: int

    @property
    def theta(self) -> np.ndarray:
        return self.ellipsoid.center


@dataclass(frozen=True)
class TooThin:
    ellipsoid: Ellipsoid
    min_axis: float
    chebyshev_radius: float


@dataclass(frozen=True)
class Infeasible:
    chebyshev_radius: float


MveResult = Union[Center, TooThin, Infeasible]


def iteration_bound(K: int, delta: float, delta_ball: float) -> int:
    """``ceil(K (ln delta - ln delta_ball) / -ln(1 - 1/K))``."""
    if K < 2:
        raise ValueError("bound needs K >= 2")
    if not delta >= delta_ball > 0:
        raise ValueError("need delta >= delta_ball > 0")
    gap = math.log(delta) - math.log(delta_ball)
    if gap == 0.0:
        return 0
    return math.ceil(K * gap / -math.log1p(-1.0 / K))


# ---------------------------------------------------------------------------
# interior-point solver


def _mve_normalized(A: np.ndarray, tol: float, max_iter: int):
    """MVE of ``{x | A x <= 1}`` where ``x = 0`` is strictly interior.

    Primal-dual path following on the optimality conditions

        E^2 = (A' U A)^{-1},  h_i = |E a_i|,
        A'(u * h) = 0,  A c + h + z = 1,  u * z = mu.

    Returns ``(c, E2, iterations)`` or ``None`` when it stalls.
    """
    m, n = A.shape
    # start with an ellipsoid well inside: leverage scores bound h at u = const
    lev = np.einsum("ij,ji->i", A, np.linalg.solve(A.T @ A, A.T))
    u = np.full(m, 4.0 * max(lev.max(), 1e-12))
    c = np.zeros(n)
    E2 = np.linalg.inv(A.T @ (u[:, None] * A))
    Q = A @ E2 @ A.T
    h = np.sqrt(np.maximum(np.diag(Q), 0.0))
    z = np.maximum(1.0 - A @ c - h, 1e-3)
    scale = np.linalg.norm(A, axis=1).max()
    for it in range(1, max_iter + 1):
        E2 = np.linalg.inv(A.T @ (u[:, None] * A))
        E2 = 0.5 * (E2 + E2.T)
        Q = A @ E2 @ A.T
        h = np.sqrt(np.maximum(np.diag(Q), 1e-300))
        R1 = A.T @ (u * h)
        R2 = 1.0 - A @ c - h - z
        gap = float(u @ z) / m
        r1 = np.linalg.norm(R1) / (1.0 + np.linalg.norm(u * h))
        r2 = np.abs(R2).max()
        if r1 < tol and r2 < tol and gap < tol:
            return c, E2, it
        mu = 0.1 * gap if (r1 < 1e-2 and r2 < 1e-2) else 0.5 * gap
        R3 = u * z - mu
        Dh = -(Q * Q) / (2.0 * h[:, None])
        G = np.diag(z / u) - Dh
        P = A.T @ (np.diag(h) + u[:, None] * Dh)
        try:
            GiA = np.linalg.solve(G, A)
            w = np.linalg.solve(G, R2 + R3 / u)
            dc = np.linalg.solve(P @ GiA, -R1 + P @ w)
        except np.linalg.LinAlgError:
            return None
        du = GiA @ dc - w
        dz = -(R3 + z * du) / u
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dz))):
            return None
        step = 1.0
        for v, dv in ((u, du), (z, dz)):
            neg = dv < 0
            if np.any(neg):
                step = min(step, 0.99 * float(np.min(-v[neg] / dv[neg])))
        c = c + step * dc
        u = u + step * du
        z = z + step * dz
        if step < 1e-10 or not np.all(np.isfinite(c)) or np.abs(c).max() > 1e12 * (1 + scale):
            return None
    return None


def _analytic_center(A: np.ndarray, x0: np.ndarray, iters: int = 100) -> Optional[np.ndarray]:
    """Damped Newton on ``-sum log(1 - A x)`` from a strictly feasible ``x0``."""
    x = x0.copy()
    for _ in range(iters):
        s = 1.0 - A @ x
        g = A.T @ (1.0 / s)
        H = A.T @ (A / (s * s)[:, None])
        try:
            dx = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            return None
        lam2 = float(-g @ dx)
        if lam2 < 1e-18:
            break
        t = 1.0 / (1.0 + math.sqrt(lam2)) if lam2 > 0.25 else 1.0
        while np.any(A @ (x + t * dx) >= 1.0):
            t *= 0.5
        x = x + t * dx
    return x


def _solve_shifted(C: np.ndarray, d: np.ndarray, x0: np.ndarray, tol: float, max_iter: int):
    """Shift to ``x0`` (strictly interior), scale rows to ``{A y <= 1}`` and solve."""
    slack = d - C @ x0
    A = C / slack[:, None]
    res = _mve_normalized(A, tol, max_iter)
    if res is None:
        return None
    c, E2, it = res
    return x0 + c, E2, it


def mve(poly: ParamPolyhedron, delta_ball: float, tol: float = 1e-10,
        max_iter: int = 300) -> MveResult:
    """Maximum-volume ellipsoid inscribed in ``poly`` (or why there is none)."""
    C, d = poly.C, poly.d
    norms = np.linalg.norm(C, axis=1)
    keep = norms > 0
    if np.any(d[~keep] < 0):
        return Infeasible(-np.inf)
    C, d = C[keep] / norms[keep, None], d[keep] / norms[keep]
    x0, radius = chebyshev_center(C, d)
    if not radius > 0:
        return Infeasible(float(radius))
    res = _solve_shifted(C, d, x0, tol, max_iter)
    if res is None:
        log.info("MVE solver stalled; retrying from the analytic centre")
        slack = d - C @ x0
        xa = _analytic_center(C / slack[:, None], np.zeros(C.shape[1]))
        if xa is not None:
            res = _solve_shifted(C, d, x0 + xa, tol, max_iter)
    if res is None:
        raise MveError("MVE interior-point solver failed twice", poly.C, poly.d)
    center, E2, it = res
    B = np.linalg.cholesky(E2)
    # shrink just enough to sit inside every row despite rounding
    h = np.linalg.norm(C @ B, axis=1)
    room = d - C @ center
    if np.any(room <= 0):
        raise MveError("MVE centre is not interior", poly.C, poly.d)
    shrink = min(1.0, float(np.min(room / np.maximum(h, 1e-300))))
    B = B * shrink
    E = Ellipsoid(center, B)
    min_axis = float(E.semi_axes.min())
    if min_axis < delta_ball:
        return TooThin(E, min_axis, float(radius))
    return Center(E, it)
