"""Monotone operators, cocoercive maps and the forward-backward map.

A set-valued operator A is only reachable through its resolvent and through
``nearest_selection`` (the element of Ax closest to a target vector); the
membership gap and the minimal-norm selection are both derived from it.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Tuple

import numpy as np

from ..config import settings
from .errors import DomainError, InvalidInput, StepRangeError
from .vectorspace import EUCLIDEAN, SpaceConstants, Vector, distance, inner, norm, same_dim

logger = logging.getLogger(__name__)

PointSampler = Callable[[np.random.Generator], Vector]


def gap_tolerance(x: Vector) -> float:
    return settings.member_gap_tol * (1.0 + norm(x))


class MonotoneOp(ABC):
    """Set-valued m-accretive operator on R^dim."""

    name: str = "A"

    def __init__(self, dim: int) -> None:
        if dim < 1:
            raise InvalidInput(f"dimension must be positive, got {dim}")
        self.dim = dim

    @abstractmethod
    def resolvent(self, lam: float, z: Vector) -> Vector:
        """(I + lam A)^{-1} z."""

    @abstractmethod
    def nearest_selection(self, x: Vector, target: Vector) -> Vector:
        """The element of Ax closest to ``target``."""

    def in_domain(self, x: Vector) -> bool:
        return True

    @property
    def selection_lipschitz(self) -> float:
        """Lipschitz constant of the minimal selection, inf when unknown."""
        return math.inf

    def require_domain(self, x: Vector) -> None:
        if x.shape != (self.dim,):
            raise InvalidInput(f"{self.name} acts on R^{self.dim}, got a vector of shape {x.shape}")
        if not self.in_domain(x):
            raise DomainError(f"point {x.tolist()} is outside the domain of {self.name}")

    def member_gap(self, x: Vector, v: Vector) -> float:
        """Distance from v to the set Ax (0 when v belongs to Ax)."""
        self.require_domain(x)
        same_dim(x, v)
        return distance(self.nearest_selection(x, v), v)

    def min_norm_at(self, x: Vector) -> Tuple[float, Vector]:
        self.require_domain(x)
        witness = self.nearest_selection(x, np.zeros(self.dim))
        return norm(witness), witness


class LinearOp(MonotoneOp):
    """A x = M x for a matrix with positive semidefinite symmetric part."""

    def __init__(self, matrix: np.ndarray, name: str = "linear") -> None:
        M = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        if M.shape[0] != M.shape[1]:
            raise InvalidInput(f"linear operator needs a square matrix, got {M.shape}")
        if not np.all(np.isfinite(M)):
            raise InvalidInput("linear operator has non-finite entries")
        sym = 0.5 * (M + M.T)
        lowest = float(np.linalg.eigvalsh(sym).min())
        if lowest < -1e-12 * (1.0 + float(np.abs(M).max())):
            raise InvalidInput(f"matrix is not monotone: symmetric part has eigenvalue {lowest}")
        super().__init__(M.shape[0])
        self.matrix = M
        self.name = name
        self._identity = np.eye(self.dim)

    def resolvent(self, lam: float, z: Vector) -> Vector:
        return np.linalg.solve(self._identity + lam * self.matrix, z)

    def nearest_selection(self, x: Vector, target: Vector) -> Vector:
        return self.matrix @ x

    @property
    def selection_lipschitz(self) -> float:
        return float(np.linalg.norm(self.matrix, 2))


class L1Subdifferential(MonotoneOp):
    """A = w * subdifferential of the l1 norm; the resolvent is soft-thresholding."""

    def __init__(self, dim: int, weight: float) -> None:
        if not weight > 0.0 or not math.isfinite(weight):
            raise InvalidInput(f"l1 weight must be a positive real, got {weight}")
        super().__init__(dim)
        self.weight = float(weight)
        self.name = "l1"

    def resolvent(self, lam: float, z: Vector) -> Vector:
        return soft_threshold(z, lam * self.weight)

    def nearest_selection(self, x: Vector, target: Vector) -> Vector:
        w = self.weight
        return np.where(x != 0.0, w * np.sign(x), np.clip(target, -w, w))


class BoxNormalCone(MonotoneOp):
    """Normal cone of the box [lo, hi]; the resolvent is the projection."""

    def __init__(self, lo: Vector, hi: Vector) -> None:
        same_dim(lo, hi)
        if not np.all(lo < hi):
            raise InvalidInput(f"box needs lo < hi coordinatewise, got {lo.tolist()} / {hi.tolist()}")
        super().__init__(lo.shape[0])
        self.lo = lo
        self.hi = hi
        self.name = "box"

    def resolvent(self, lam: float, z: Vector) -> Vector:
        return np.clip(z, self.lo, self.hi)

    def in_domain(self, x: Vector) -> bool:
        return bool(np.all(x >= self.lo) and np.all(x <= self.hi))

    def nearest_selection(self, x: Vector, target: Vector) -> Vector:
        at_lo = x == self.lo
        at_hi = x == self.hi
        v = np.zeros(self.dim)
        v = np.where(at_lo, np.minimum(target, 0.0), v)
        return np.where(at_hi, np.maximum(target, 0.0), v)


def soft_threshold(z: Vector, threshold: float) -> Vector:
    return np.sign(z) * np.maximum(np.abs(z) - threshold, 0.0)


@dataclass(frozen=True)
class CocoerciveMap:
    apply: Callable[[Vector], Vector]
    theta: float
    name: str = "B"

    def __post_init__(self) -> None:
        if not self.theta > 0.0:
            raise InvalidInput(f"cocoercivity parameter must be positive, got {self.theta}")

    def __call__(self, x: Vector) -> Vector:
        return self.apply(x)


def affine_map(Q: np.ndarray, q: np.ndarray, theta: float, name: str = "affine") -> CocoerciveMap:
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if Q.shape != (q.shape[0], q.shape[0]):
        raise InvalidInput(f"affine map shapes do not match: {Q.shape} and {q.shape}")
    return CocoerciveMap(apply=lambda x: Q @ x + q, theta=theta, name=name)


@dataclass(frozen=True)
class OperatorPair:
    A: MonotoneOp
    B: CocoerciveMap
    space: SpaceConstants = field(default=EUCLIDEAN)

    @property
    def kappa(self) -> float:
        return self.space.kappa

    @property
    def Theta(self) -> float:
        return self.B.theta / self.space.kappa

    @property
    def dim(self) -> int:
        return self.A.dim


def check_step(lam: float, upper: float, *, index: int | None = None, allow_zero: bool = False) -> None:
    lower_ok = lam >= 0.0 if allow_zero else lam > 0.0
    if not math.isfinite(lam) or not lower_ok or lam > upper * (1.0 + settings.step_rtol):
        where = f" at index {index}" if index is not None else ""
        interval = "[0" if allow_zero else "(0"
        raise StepRangeError(f"step {lam}{where} outside {interval}, {upper}]", index=index)


def forward(B: CocoerciveMap, lam: float, x: Vector, kappa: float = 1.0) -> Vector:
    """E_lam(x) = x - lam B(x), nonexpansive for lam in [0, 2 theta / kappa]."""
    check_step(lam, 2.0 * B.theta / kappa, allow_zero=True)
    if lam == 0.0:
        return x
    return x - lam * B(x)


def fb_step(pair: OperatorPair, lam: float, x: Vector, eps: Vector | None) -> Tuple[Vector, Vector]:
    z = x - lam * pair.B(x)
    if eps is not None:
        z = z + lam * eps
    return pair.A.resolvent(lam, z), z


def fb_map(pair: OperatorPair, lam: float, x: Vector, eps: Vector | None = None) -> Vector:
    """J_lam(E_lam(x) + lam eps); with eps = 0 this is T_lam(x)."""
    check_step(lam, pair.Theta)
    if x.shape != (pair.dim,):
        raise InvalidInput(f"expected a vector of dimension {pair.dim}, got shape {x.shape}")
    if eps is not None:
        same_dim(x, eps)
    x_next, _ = fb_step(pair, lam, x, eps)
    return x_next


def fb_residual(pair: OperatorPair, lam: float, x: Vector, eps: Vector | None, x_next: Vector) -> float:
    """Membership gap of (E_lam(x) + lam eps - x_next) / lam in A x_next."""
    z = x - lam * pair.B(x)
    if eps is not None:
        z = z + lam * eps
    return pair.A.member_gap(x_next, (z - x_next) / lam)


def min_norm(pair: OperatorPair, u: Vector) -> Tuple[float, Vector]:
    """|||(A+B)u||| with the minimizing selection v + Bu, v in Au."""
    pair.A.require_domain(u)
    bu = pair.B(u)
    v = pair.A.nearest_selection(u, -bu)
    selection = v + bu
    return norm(selection), selection


def verify_monotone(
    op: MonotoneOp,
    sampler: PointSampler,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Worst value of <x-y, u-v> over resolvent-generated graph pairs, clipped at 0."""
    if trials < 1:
        raise InvalidInput("trials must be >= 1")
    worst = 0.0
    for _ in range(trials):
        lam = float(10.0 ** rng.uniform(-2.0, 1.0))
        z, z2 = sampler(rng), sampler(rng)
        x, y = op.resolvent(lam, z), op.resolvent(lam, z2)
        value = inner(x - y, (z - x) / lam - (z2 - y) / lam)
        worst = min(worst, value)
    return worst


def verify_cocoercive(
    B: CocoerciveMap,
    sampler: PointSampler,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Worst slack of <x-y, Bx-By> - theta ||Bx-By||^2."""
    if trials < 1:
        raise InvalidInput("trials must be >= 1")
    worst = math.inf
    for _ in range(trials):
        x, y = sampler(rng), sampler(rng)
        d = B(x) - B(y)
        sq = inner(d, d)
        penalty = B.theta * sq if sq > 0.0 else 0.0
        worst = min(worst, inner(x - y, d) - penalty)
    return worst


def max_expansion(
    mapping: Callable[[Vector], Vector],
    sampler: PointSampler,
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Largest ||F z - F z'|| - ||z - z'|| seen on sampled pairs."""
    worst = -math.inf
    for _ in range(trials):
        z, z2 = sampler(rng), sampler(rng)
        worst = max(worst, distance(mapping(z), mapping(z2)) - distance(z, z2))
    return worst
