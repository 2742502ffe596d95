"""Linear-in-parameters policies over monomials of state terms."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Optional, Sequence

import numpy as np

from .dynamics import Box

ORDERING_TAG = "graded-lex"

_TERM_RE = re.compile(r"^(?:(sin|cos)\()?x\[(\d+)\]\)?$")


@dataclass(frozen=True)
class Term:
    """A scalar function of the state: ``x[i]``, ``sin(x[i])`` or ``cos(x[i])``."""

    expr: str
    name: str

    def __post_init__(self):
        if _TERM_RE.match(self.expr.replace(" ", "")) is None:
            raise ValueError(f"unsupported term expression {self.expr!r}")

    @property
    def index(self) -> int:
        return int(_TERM_RE.match(self.expr.replace(" ", "")).group(2))

    @property
    def func(self) -> Optional[str]:
        return _TERM_RE.match(self.expr.replace(" ", "")).group(1)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        v = x[..., self.index]
        if self.func == "sin":
            return np.sin(v)
        if self.func == "cos":
            return np.cos(v)
        return v


def state_terms(state_names: Sequence[str]) -> list:
    return [Term(f"x[{i}]", name) for i, name in enumerate(state_names)]


def monomials(num_terms: int, degree: int, min_degree: int = 0) -> list:
    """Multi-indices (as sorted term-index tuples) with ``min_degree <= |a| <= degree``.

    Graded-lex order: by total degree, then lexicographically on term indices.
    """
    out = []
    for k in range(min_degree, degree + 1):
        out.extend(combinations_with_replacement(range(num_terms), k))
    return out


@dataclass(frozen=True)
class ChannelBasis:
    """Monomials of ``terms`` feeding one input channel."""

    terms: tuple
    degree: int
    min_degree: int = 0

    def __post_init__(self):
        if self.degree < 0 or self.min_degree < 0 or self.min_degree > max(self.degree, 0):
            raise ValueError("invalid degree bounds")
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(
            self, "_monos", tuple(monomials(len(self.terms), self.degree, self.min_degree))
        )

    @property
    def size(self) -> int:
        return len(self._monos)

    @property
    def names(self) -> list:
        out = []
        for mono in self._monos:
            out.append("*".join(self.terms[i].name for i in mono) if mono else "1")
        return out

    def features(self, x: np.ndarray) -> np.ndarray:
        """Basis values with shape ``x.shape[:-1] + (size,)``."""
        x = np.asarray(x, dtype=float)
        vals = [t(x) for t in self.terms]
        out = np.empty(x.shape[:-1] + (self.size,))
        for k, mono in enumerate(self._monos):
            if not mono:
                out[..., k] = 1.0
                continue
            acc = vals[mono[0]]
            for i in mono[1:]:
                acc = acc * vals[i]
            out[..., k] = acc
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out.reshape(-1, self.size)))[0, 1]
            raise ValueError(f"non-finite basis value for monomial '{self.names[bad]}'")
        return out

    def to_dict(self) -> dict:
        return {
            "terms": [{"expr": t.expr, "name": t.name} for t in self.terms],
            "degree": self.degree,
            "min_degree": self.min_degree,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelBasis":
        terms = tuple(Term(t["expr"], t["name"]) for t in d["terms"])
        return cls(terms, int(d["degree"]), int(d.get("min_degree", 0)))


@dataclass(frozen=True)
class BasisSet:
    """Per-channel bases; parameters are concatenated channel by channel."""

    channels: tuple

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if not self.channels:
            raise ValueError("basis needs at least one channel")

    @property
    def input_dim(self) -> int:
        return len(self.channels)

    @property
    def sizes(self) -> list:
        return [c.size for c in self.channels]

    @property
    def K(self) -> int:
        return sum(self.sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)])

    def channel_features(self, x) -> list:
        return [c.features(x) for c in self.channels]

    def to_dict(self) -> dict:
        return {"ordering": ORDERING_TAG, "channels": [c.to_dict() for c in self.channels]}

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSet":
        if d.get("ordering", ORDERING_TAG) != ORDERING_TAG:
            raise ValueError(f"unsupported basis ordering {d.get('ordering')!r}")
        return cls(tuple(ChannelBasis.from_dict(c) for c in d["channels"]))


def eval_basis(basis: BasisSet, x) -> np.ndarray:
    """Block-diagonal feature matrix ``Phi(x)`` of shape ``(m, K)``.

    Also accepts a batch of states, returning ``(..., m, K)``.
    """
    x = np.asarray(x, dtype=float)
    feats = basis.channel_features(x)
    off = basis.offsets
    Phi = np.zeros(x.shape[:-1] + (basis.input_dim, basis.K))
    for c, f in enumerate(feats):
        Phi[..., c, off[c]:off[c + 1]] = f
    return Phi


@dataclass
class PolicyParams:
    """Coefficient vector ``theta`` over a basis, plus the saturation box."""

    theta: np.ndarray
    basis: BasisSet
    input_box: Optional[Box] = None
    plant: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if self.theta.size != self.basis.K:
            raise ValueError(f"theta has {self.theta.size} entries, basis has K={self.basis.K}")

    def raw(self, x) -> np.ndarray:
        """Un-saturated output ``Phi(x) theta``; vectorized over leading axes."""
        x = np.asarray(x, dtype=float)
        off = self.basis.offsets
        out = np.empty(x.shape[:-1] + (self.basis.input_dim,))
        for c, f in enumerate(self.basis.channel_features(x)):
            # elementwise product + last-axis sum: identical per row for any batch size
            out[..., c] = (f * self.theta[off[c]:off[c + 1]]).sum(axis=-1)
        return out

    def __call__(self, x) -> np.ndarray:
        u = self.raw(x)
        return u if self.input_box is None else self.input_box.clip(u)

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(include_provenance=False), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self, include_provenance: bool = True) -> dict:
        d = {
            "format": "policy_cegis.policy/1",
            "plant": self.plant,
            "basis": self.basis.to_dict(),
            "theta": [float(t) for t in self.theta],
            "input_box": None if self.input_box is None else self.input_box.to_list(),
        }
        if include_provenance:
            d["provenance"] = self.provenance
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyParams":
        box = d.get("input_box")
        return cls(
            theta=np.array(d["theta"], dtype=float),
            basis=BasisSet.from_dict(d["basis"]),
            input_box=None if box is None else Box(*np.array(box, dtype=float).T),
            plant=d.get("plant", ""),
            provenance=d.get("provenance", {}),
        )

    def save(self, path):
        # json writes floats with repr(), which round-trips exactly
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PolicyParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def eval_policy(params: PolicyParams, x) -> np.ndarray:
    """Saturated policy output ``clip(Phi(x) theta)``."""
    return params(x)


# ---------------------------------------------------------------------------
# case-study bases


def car_basis(num_cars: int, affine: bool) -> BasisSet:
    """Centralized car policy: every input sees all ``4 l`` states."""
    names = []
    for c in range(num_cars):
        sfx = "" if num_cars == 1 else f"_{c + 1}"
        names += [f"y{sfx}", f"v{sfx}", f"alpha{sfx}", f"beta{sfx}"]
    ch = ChannelBasis(state_terms(names), degree=1, min_degree=0 if affine else 1)
    return BasisSet((ch,) * (2 * num_cars))


FAN_NAMES = ("v", "gamma", "beta", "dbeta", "h")


def fan_basis(trig: bool = True, degree: int = 2) -> BasisSet:
    terms = state_terms(FAN_NAMES)
    if trig:
        terms += [Term("sin(x[2])", "sin_beta"), Term("cos(x[2])", "cos_beta")]
    ch = ChannelBasis(terms, degree=degree, min_degree=0)
    return BasisSet((ch, ch))


def basis_from_config(spec: dict, state_names: Sequence[str], input_dim: int) -> BasisSet:
    """Build a basis from a config ``basis`` section.

    ``kind`` is ``car_linear``, ``car_affine``, ``fan_trig``, ``fan_poly`` or
    ``custom`` (explicit ``terms`` expressions, ``degree``, ``min_degree``).
    """
    kind = spec.get("kind")
    if kind in ("car_linear", "car_affine"):
        return car_basis(len(state_names) // 4, affine=kind == "car_affine")
    if kind in ("fan_trig", "fan_poly"):
        return fan_basis(trig=kind == "fan_trig", degree=int(spec.get("degree", 2)))
    if kind == "custom":
        terms = []
        for expr in spec["terms"]:
            t = Term(expr, expr)
            terms.append(Term(expr, state_names[t.index] if t.func is None
                              else f"{t.func}_{state_names[t.index]}"))
        ch = ChannelBasis(terms, int(spec.get("degree", 1)), int(spec.get("min_degree", 0)))
        return BasisSet((ch,) * input_dim)
    raise ValueError(f"unknown basis kind {kind!r}")
