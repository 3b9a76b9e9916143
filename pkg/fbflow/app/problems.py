"""Catalog of concrete operator pairs used by the experiments and tests.

Each factory returns a ``ProblemInstance`` whose pair has been checked for
monotonicity of A and cocoercivity of B at construction time.  Zero oracles
are built from optimality conditions only and never call the
forward-backward map.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from ..config import settings
from .errors import InvalidInput
from .operators import (
    BoxNormalCone,
    L1Subdifferential,
    LinearOp,
    OperatorPair,
    PointSampler,
    affine_map,
    verify_cocoercive,
    verify_monotone,
)
from .vectorspace import Vector, as_vector

logger = logging.getLogger(__name__)

ExactFlow = Callable[[Vector, float], Vector]
ZeroOracle = Callable[[Vector], Vector]

CONSTRUCTION_SEED = 0
CONSTRUCTION_TOL = 1e-8


@dataclass(frozen=True)
class ProblemInstance:
    id: str
    pair: OperatorPair
    default_x0: Vector
    sample_point: PointSampler
    sample_domain: PointSampler
    exact_flow: Optional[ExactFlow] = None
    zero_oracle: Optional[ZeroOracle] = None
    notes: str = ""
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.pair.dim

    @property
    def Theta(self) -> float:
        return self.pair.Theta


def spectral_norm_bound(G: np.ndarray, iterations: int = 500) -> float:
    """Upper estimate of ||G||_2 for a symmetric positive semidefinite G.

    Power iteration from a fixed start gives the Rayleigh quotient plus its
    residual; the result never drops below the top eigenvalue reported by
    LAPACK and never exceeds the Frobenius norm, then gets a relative pad.
    """
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if G.shape == (1, 1):
        return abs(float(G[0, 0]))
    if not np.any(G):
        return 0.0
    n = G.shape[0]
    v = np.linspace(1.0, 2.0, n)
    v /= np.linalg.norm(v)
    for _ in range(iterations):
        w = G @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            break
        w /= nw
        converged = float(np.linalg.norm(w - v)) < 1e-14
        v = w
        if converged:
            break
    rayleigh = float(v @ G @ v)
    residual = float(np.linalg.norm(G @ v - rayleigh * v))
    top = float(np.linalg.eigvalsh(0.5 * (G + G.T)).max())
    bound = min(max(rayleigh + residual, top), float(np.linalg.norm(G, "fro")))
    return bound * (1.0 + 1e-12)


def _gaussian_sampler(center: Vector, scale: float) -> PointSampler:
    def sample(rng: np.random.Generator) -> Vector:
        return center + scale * rng.standard_normal(center.shape[0])

    return sample


def _verify_pair(problem_id: str, pair: OperatorPair, sampler: PointSampler) -> None:
    rng = np.random.default_rng(CONSTRUCTION_SEED)
    trials = settings.construction_trials
    mono = verify_monotone(pair.A, sampler, trials, rng)
    coco = verify_cocoercive(pair.B, sampler, trials, rng)
    if mono < -CONSTRUCTION_TOL or coco < -CONSTRUCTION_TOL:
        raise InvalidInput(
            f"{problem_id}: construction check failed (monotone {mono:.3e}, cocoercive {coco:.3e})"
        )
    logger.debug(f"{problem_id}: monotone slack {mono:.3e}, cocoercive slack {coco:.3e} over {trials} trials")


def _matrix(values: Any, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise InvalidInput(f"{name} must be a finite matrix, got shape {M.shape}")
    return M


def make_linear1d(a: float = 1.0, b: float = 1.0) -> ProblemInstance:
    a, b = float(a), float(b)
    if a < 0.0:
        raise InvalidInput(f"linear1d needs a >= 0, got {a}")
    if not b > 0.0:
        raise InvalidInput(f"linear1d needs b > 0 for a finite theta, got {b}")
    pair = OperatorPair(
        A=LinearOp([[a]], name="linear1d.A"),
        B=affine_map([[b]], [0.0], theta=1.0 / b, name="linear1d.B"),
    )
    rate = a + b

    def exact_flow(x0: Vector, t: float) -> Vector:
        return math.exp(-rate * t) * x0

    sampler = _gaussian_sampler(np.zeros(1), 2.0)
    instance = ProblemInstance(
        id="linear1d",
        pair=pair,
        default_x0=as_vector([1.0]),
        sample_point=sampler,
        sample_domain=sampler,
        exact_flow=exact_flow,
        zero_oracle=lambda x: np.zeros(1),
        notes="A x = a x, B x = b x; theta = 1/b; |||(A+B)u||| = (a+b)|u|; flow e^{-(a+b)t} x0",
        params={"a": a, "b": b},
    )
    _verify_pair(instance.id, pair, sampler)
    return instance


def rotation(angle: float) -> np.ndarray:
    """Counterclockwise rotation by ``angle``."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def make_skew2d(omega: float = 1.0, gamma: float = 0.5) -> ProblemInstance:
    """A = [[0, w], [-w, 0]], B = gamma I.

    The flow u' = -(A+B)u turns counterclockwise for omega > 0:
    x0 = (1, 0), gamma = 0, t = pi/2 gives (0, 1).
    """
    omega, gamma = float(omega), float(gamma)
    if gamma < 0.0:
        raise InvalidInput(f"skew2d needs gamma >= 0, got {gamma}")
    # B = 0 puts no restriction on the step
    theta = 1.0 / gamma if gamma > 0.0 else math.inf
    pair = OperatorPair(
        A=LinearOp([[0.0, omega], [-omega, 0.0]], name="skew2d.A"),
        B=affine_map(gamma * np.eye(2), np.zeros(2), theta=theta, name="skew2d.B"),
    )

    def exact_flow(x0: Vector, t: float) -> Vector:
        return math.exp(-gamma * t) * (rotation(omega * t) @ x0)

    if gamma == 0.0 and omega == 0.0:
        zero_oracle: ZeroOracle = lambda x: np.array(x, dtype=np.float64)
    else:
        zero_oracle = lambda x: np.zeros(2)

    sampler = _gaussian_sampler(np.zeros(2), 2.0)
    instance = ProblemInstance(
        id="skew2d",
        pair=pair,
        default_x0=as_vector([1.0, 0.0]),
        sample_point=sampler,
        sample_domain=sampler,
        exact_flow=exact_flow,
        zero_oracle=zero_oracle,
        notes="skew A, B = gamma I; theta = 1/gamma (inf when gamma = 0); flow e^{-gamma t} R(omega t) x0, counterclockwise",
        params={"omega": omega, "gamma": gamma},
    )
    _verify_pair(instance.id, pair, sampler)
    return instance


def _lasso_root(c: float, d: float, w: float) -> float:
    """Solution of 0 in c x - d + w sign(x) by bracketing the optimality map."""
    if c <= 0.0:
        raise InvalidInput("degenerate coordinate in the lasso oracle")
    if abs(d) <= w:
        return 0.0
    radius = (abs(d) + w) / c + 1.0
    root = brentq(lambda x: c * x - d + w * np.sign(x), -radius, radius, xtol=1e-15, rtol=1e-15)
    return float(root)


def _lasso_flow_1d(c: float, d: float, w: float) -> ExactFlow:
    """u' = -(c u - d) - w sign(u): piecewise exponential, reaches 0 in finite time."""

    def flow(x0: Vector, t: float) -> Vector:
        u = float(x0[0])
        remaining = float(t)
        # at most positive -> 0 -> negative (or the mirror)
        for _ in range(3):
            if remaining <= 0.0:
                break
            if u == 0.0:
                if abs(d) <= w:
                    break
                target = (d - w) / c if d > w else (d + w) / c
                u = target * -math.expm1(-c * remaining)
                break
            target = (d - w) / c if u > 0.0 else (d + w) / c
            if target * u > 0.0 or target == 0.0:
                u = target + (u - target) * math.exp(-c * remaining)
                break
            hit = math.log((u - target) / -target) / c
            if hit >= remaining:
                u = target + (u - target) * math.exp(-c * remaining)
                break
            u = 0.0
            remaining -= hit
        return np.array([u])

    return flow


def _lasso_oracle(M: np.ndarray, b: np.ndarray, w: float) -> Optional[Vector]:
    d = M.shape[1]
    if d == 1:
        col = M[:, 0]
        return np.array([_lasso_root(float(col @ col), float(col @ b), w)])
    if d != 2:
        return None

    c0, c1 = M[:, 0], M[:, 1]

    def inner(x0: float) -> float:
        cc = float(c1 @ c1)
        if cc == 0.0:
            return 0.0
        return _lasso_root(cc, float(c1 @ (b - c0 * x0)), w)

    def profile(x0: float) -> float:
        x = np.array([x0, inner(x0)])
        r = M @ x - b
        return 0.5 * float(r @ r) + w * float(np.abs(x).sum())

    radius = float(b @ b) / (2.0 * w) + 1.0
    grid = np.linspace(-radius, radius, 401)
    values = [profile(float(g)) for g in grid]
    i = int(np.argmin(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.shape[0] - 1)]
    res = minimize_scalar(profile, bounds=(float(lo), float(hi)), method="bounded", options={"xatol": 1e-12})
    x0 = float(res.x)
    # snap onto the kink at 0 when the optimality condition allows it
    x2_at_zero = inner(0.0)
    g0 = float(c0 @ (c1 * x2_at_zero - b))
    if abs(x0) <= 1e-8 * radius and abs(g0) <= w * (1.0 + 1e-12):
        x0 = 0.0
    return _polish_lasso(M.T @ M, M.T @ b, w, np.array([x0, inner(x0)]))


def _polish_lasso(G: np.ndarray, Mtb: np.ndarray, w: float, x: np.ndarray) -> np.ndarray:
    """Re-solve the optimality system on the sign pattern of ``x``; keep ``x`` if it does not check out."""
    signs = np.where(np.abs(x) <= 1e-9 * (1.0 + float(np.abs(x).max())), 0.0, np.sign(x))
    free = signs != 0.0
    polished = np.zeros_like(x)
    if free.any():
        try:
            polished[free] = np.linalg.solve(G[np.ix_(free, free)], Mtb[free] - w * signs[free])
        except np.linalg.LinAlgError:
            return x
    grad = G @ polished - Mtb
    consistent = np.all(signs[free] * polished[free] > 0.0) and np.all(
        np.abs(grad[~free]) <= w * (1.0 + 1e-9)
    )
    return polished if consistent else x


def make_l1_quadratic(M: Any = ((1.0,),), b: Any = (1.0,), w: float = 1.0) -> ProblemInstance:
    """A = w d||.||_1, B x = M^T (M x - b): the proximal-gradient setting."""
    M = _matrix(M, "M")
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    w = float(w)
    if not np.any(M):
        raise InvalidInput("l1_quadratic needs a nonzero matrix M")
    if b.shape[0] != M.shape[0]:
        raise InvalidInput(f"b has length {b.shape[0]}, M has {M.shape[0]} rows")
    if not w > 0.0:
        raise InvalidInput(f"l1 weight must be positive, got {w}")
    dim = M.shape[1]
    G = M.T @ M
    Mtb = M.T @ b
    theta = 1.0 / spectral_norm_bound(G)
    pair = OperatorPair(
        A=L1Subdifferential(dim, w),
        B=affine_map(G, -Mtb, theta=theta, name="l1_quadratic.B"),
    )
    zero = _lasso_oracle(M, b, w)
    exact_flow = _lasso_flow_1d(float(G[0, 0]), float(Mtb[0]), w) if dim == 1 else None

    sampler = _gaussian_sampler(np.zeros(dim), 2.0)
    instance = ProblemInstance(
        id="l1_quadratic",
        pair=pair,
        default_x0=as_vector(np.full(dim, 2.0)),
        sample_point=sampler,
        sample_domain=sampler,
        exact_flow=exact_flow,
        zero_oracle=(lambda x: zero.copy()) if zero is not None else None,
        notes="A = w d|x|_1 (soft-threshold resolvent), B = M^T(Mx-b); theta = 1/||M^T M||_2 from power iteration",
        params={"M": M.tolist(), "b": b.tolist(), "w": w},
    )
    _verify_pair(instance.id, pair, sampler)
    return instance


def _box_oracle(lo: Vector, hi: Vector, Q: np.ndarray, q: Vector) -> Optional[Vector]:
    """KKT point of min 1/2 x'Qx + q'x over the box, by active-set enumeration."""
    n = lo.shape[0]
    if float(np.linalg.eigvalsh(Q).min()) <= 0.0:
        return None
    tol = 1e-10 * (1.0 + float(np.abs(Q).max()) + float(np.abs(q).max()))
    for pattern in itertools.product((0, -1, 1), repeat=n):
        status = np.array(pattern)
        x = np.where(status == -1, lo, np.where(status == 1, hi, 0.0))
        free = status == 0
        if free.any():
            rhs = -q[free] - Q[np.ix_(free, ~free)] @ x[~free]
            x[free] = np.linalg.solve(Q[np.ix_(free, free)], rhs)
            if np.any(x[free] < lo[free] - tol) or np.any(x[free] > hi[free] + tol):
                continue
            x = np.clip(x, lo, hi)
        grad = Q @ x + q
        if np.any(grad[status == -1] < -tol) or np.any(grad[status == 1] > tol):
            continue
        return x
    return None


def make_box_projected(
    lo: Any = (0.0, 0.0),
    hi: Any = (1.0, 1.0),
    Q: Any = ((2.0, 0.5), (0.5, 1.0)),
    q: Any = (-1.0, -2.0),
) -> ProblemInstance:
    """A = normal cone of [lo, hi], B x = Q x + q: the projected-gradient setting."""
    lo_v, hi_v = as_vector(lo), as_vector(hi)
    Q = _matrix(Q, "Q")
    q_v = np.asarray(q, dtype=np.float64).reshape(-1)
    if Q.shape != (lo_v.shape[0], lo_v.shape[0]) or q_v.shape[0] != lo_v.shape[0]:
        raise InvalidInput(f"box of dimension {lo_v.shape[0]} does not match Q {Q.shape} / q {q_v.shape}")
    if not np.allclose(Q, Q.T, rtol=0.0, atol=1e-12):
        raise InvalidInput("Q must be symmetric")
    if float(np.linalg.eigvalsh(Q).min()) < -1e-12:
        raise InvalidInput("Q must be positive semidefinite")
    norm_q = spectral_norm_bound(Q)
    theta = 1.0 / norm_q if norm_q > 0.0 else math.inf
    A = BoxNormalCone(lo_v, hi_v)
    pair = OperatorPair(A=A, B=affine_map(Q, q_v, theta=theta, name="box_projected.B"))
    zero = _box_oracle(lo_v, hi_v, Q, q_v)

    center = 0.5 * (lo_v + hi_v)
    width = float((hi_v - lo_v).max())
    ambient = _gaussian_sampler(center, width)

    def sample_domain(rng: np.random.Generator) -> Vector:
        # clipping puts a share of the samples on faces and vertices
        return np.clip(ambient(rng), lo_v, hi_v)

    instance = ProblemInstance(
        id="box_projected",
        pair=pair,
        default_x0=as_vector(np.where(np.arange(lo_v.shape[0]) == 0, hi_v, lo_v)),
        sample_point=ambient,
        sample_domain=sample_domain,
        exact_flow=None,
        zero_oracle=(lambda x: zero.copy()) if zero is not None else None,
        notes="A = normal cone of the box (projection resolvent), B = Qx + q; theta = 1/||Q||_2",
        params={"lo": lo_v.tolist(), "hi": hi_v.tolist(), "Q": Q.tolist(), "q": q_v.tolist()},
    )
    _verify_pair(instance.id, pair, ambient)
    return instance


PROBLEM_FACTORIES: Dict[str, Callable[..., ProblemInstance]] = {
    "linear1d": make_linear1d,
    "skew2d": make_skew2d,
    "l1_quadratic": make_l1_quadratic,
    "box_projected": make_box_projected,
}

CATALOG_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "linear1d": {"a": 1.0, "b": 1.0},
    "skew2d": {"omega": 1.0, "gamma": 0.5},
    "l1_quadratic": {"M": [[1.0]], "b": [1.0], "w": 1.0},
    "box_projected": {"lo": [0.0, 0.0], "hi": [1.0, 1.0], "Q": [[2.0, 0.5], [0.5, 1.0]], "q": [-1.0, -2.0]},
}


def build_problem(problem_id: str, params: Mapping[str, Any] | None = None) -> ProblemInstance:
    factory = PROBLEM_FACTORIES.get(problem_id)
    if factory is None:
        raise InvalidInput(f"unknown problem {problem_id!r}; known: {', '.join(sorted(PROBLEM_FACTORIES))}")
    kwargs = dict(CATALOG_DEFAULTS[problem_id])
    kwargs.update(params or {})
    try:
        return factory(**kwargs)
    except TypeError as exc:
        raise InvalidInput(f"bad parameters for {problem_id}: {exc}") from exc


def default_catalog() -> List[ProblemInstance]:
    return [build_problem(pid) for pid in PROBLEM_FACTORIES]
