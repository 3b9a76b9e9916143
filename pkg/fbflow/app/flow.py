"""Finite-horizon semigroup generated by -(A+B).

The flow is built from forward-backward products with constant steps
(u_m(t) = [T_{t/m}]^m u0); every approximation returned here carries the
certified distance to the true flow that the a-priori estimate gives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist

from ..config import settings
from .errors import BudgetExceeded, InvalidInput, MembershipError, StepRangeError
from .operators import OperatorPair, fb_step, gap_tolerance, min_norm
from .vectorspace import Vector, distance, format_vector, inner, norm

logger = logging.getLogger(__name__)

ExactFlow = Callable[[Vector, float], Vector]

# refinement used by the reference oracle: 16x steps, a quarter of the error
ORACLE_BOOST = 16


@dataclass(frozen=True)
class FlowQuery:
    x0: Vector
    t: float
    tol: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.t) or self.t < 0.0:
            raise InvalidInput(f"flow time must be finite and >= 0, got {self.t}")
        if not self.tol > 0.0:
            raise InvalidInput(f"tolerance must be positive, got {self.tol}")


@dataclass(frozen=True)
class TrajectoryGrid:
    times: np.ndarray
    points: np.ndarray
    certified_error: float
    # |||(A+B)u0|||, the Lipschitz constant of the flow
    lipschitz: float = 0.0

    def __post_init__(self) -> None:
        if self.times.ndim != 1 or self.times.shape[0] != self.points.shape[0]:
            raise InvalidInput("trajectory grid needs one point per time")
        if self.times.shape[0] > 1 and not np.all(np.diff(self.times) > 0.0):
            raise InvalidInput("trajectory grid times must be strictly increasing")
        if self.certified_error < 0.0:
            raise InvalidInput("certified error must be >= 0")

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def spacing(self) -> float:
        return float(np.diff(self.times).max()) if self.times.shape[0] > 1 else 0.0

    def index_of(self, t: float) -> int:
        atol = 1e-12 * (1.0 + abs(self.horizon))
        hits = np.nonzero(np.abs(self.times - t) <= atol)[0]
        if hits.size == 0:
            raise InvalidInput(f"time {t} is not a grid time")
        return int(hits[0])

    def rows(self, profile: Sequence[float], digits: int = 17) -> List[List[str]]:
        fmt = f".{digits}g"
        return [
            [
                format(float(t), fmt),
                format_vector(p, digits),
                format(self.certified_error, fmt),
                format(float(v), fmt),
            ]
            for t, p, v in zip(self.times, self.points, profile)
        ]


GRID_COLUMNS = ["t", "x", "certified_error", "minnorm_profile"]


def min_admissible_m(t: float, Theta: float) -> int:
    if math.isinf(Theta) or t == 0.0:
        return 1
    return max(1, math.ceil(t / Theta))


def _run_constant(pair: OperatorPair, x0: Vector, h: float, steps: int) -> Vector:
    x = x0
    for _ in range(steps):
        x, _ = fb_step(pair, h, x, None)
    return x


def _check_constant_step(pair: OperatorPair, horizon: float, m: int) -> float:
    h = horizon / m
    if h > pair.Theta * (1.0 + settings.step_rtol):
        required = min_admissible_m(horizon, pair.Theta)
        raise StepRangeError(
            f"step {horizon}/{m} = {h} exceeds Theta = {pair.Theta}; use m >= {required}",
            required_m=required,
        )
    return h


def exp_formula(pair: OperatorPair, x0: Vector, t: float, m: int) -> Vector:
    """[T_{t/m}]^m x0."""
    if t < 0.0 or not math.isfinite(t):
        raise InvalidInput(f"t must be finite and >= 0, got {t}")
    if m < 1:
        raise InvalidInput(f"m must be >= 1, got {m}")
    if t == 0.0:
        return x0
    h = _check_constant_step(pair, t, m)
    return _run_constant(pair, x0, h, m)


def pc_interpolant(pair: OperatorPair, x0: Vector, S: float, m: int, t: float) -> Vector:
    """[T_{S/m}]^{floor(m t / S)} x0 for t in [0, S]."""
    if not 0.0 <= t <= S:
        raise InvalidInput(f"t={t} outside [0, S={S}]")
    if m < 1:
        raise InvalidInput(f"m must be >= 1, got {m}")
    h = _check_constant_step(pair, S, m)
    count = m if t == S else min(m, math.floor(m * t / S))
    return _run_constant(pair, x0, h, count)


def cauchy_bound(minnorm: float, t: float, s: float, m: float, n: float = math.inf) -> float:
    """minnorm * sqrt((t-s)^2 + t^2/m + s^2/n); n = inf stands for the limit flow."""
    if m < 1 or n < 1:
        raise InvalidInput(f"m and n must be >= 1, got {m}, {n}")
    return minnorm * math.sqrt((t - s) ** 2 + t * t / m + s * s / n)


def um_vm_gap_bound(minnorm: float, S: float, m: int) -> float:
    if m < 1:
        raise InvalidInput(f"m must be >= 1, got {m}")
    return 3.0 * S * minnorm / math.sqrt(m)


def hybrid_bound(
    x0: Vector,
    u0: Vector,
    minnorm_x0: float,
    minnorm_u0: float,
    sigma_k: float,
    tau_k: float,
    t: float,
) -> float:
    """Distance bound between x_k of a forward-backward run from x0 and u(t) from u0."""
    if tau_k < 0.0:
        raise InvalidInput(f"tau_k must be >= 0, got {tau_k}")
    return distance(x0, u0) + min(minnorm_x0, minnorm_u0) * math.sqrt(
        (sigma_k - t) ** 2 + tau_k
    )


def required_m(minnorm: float, t: float, tol: float, Theta: float) -> int:
    """Smallest m with minnorm * t / sqrt(m) <= tol and t/m <= Theta."""
    m = max(1, min_admissible_m(t, Theta))
    if minnorm == 0.0 or t == 0.0:
        return m
    ratio = minnorm * t / tol
    m = max(m, math.ceil(ratio * ratio - 1e-9))
    while minnorm * t / math.sqrt(m) > tol:
        m += 1
    return m


def approximate_flow(pair: OperatorPair, query: FlowQuery, max_steps: int | None = None) -> Tuple[Vector, int]:
    """Flow value S_t x0 within query.tol, and the m used."""
    budget = max_steps if max_steps is not None else settings.max_flow_steps
    mn, _ = min_norm(pair, query.x0)
    if mn == 0.0 or query.t == 0.0:
        return query.x0, 1
    m = required_m(mn, query.t, query.tol, pair.Theta)
    if m > budget:
        raise BudgetExceeded(
            f"tolerance {query.tol} at t={query.t} needs m={m} steps, budget is {budget}", required=m
        )
    return exp_formula(pair, query.x0, query.t, m), m


def reference_flow(
    pair: OperatorPair,
    x0: Vector,
    t: float,
    tol: float,
    exact_flow: ExactFlow | None = None,
) -> Tuple[Vector, float]:
    """Oracle value of S_t x0 and its certified error."""
    if exact_flow is not None:
        return exact_flow(x0, t), 0.0
    mn, _ = min_norm(pair, x0)
    if mn == 0.0 or t == 0.0:
        return x0, 0.0
    m = ORACLE_BOOST * required_m(mn, t, tol, pair.Theta)
    if m > settings.max_flow_steps:
        raise BudgetExceeded(f"reference flow needs m={m} steps at t={t}", required=m)
    return exp_formula(pair, x0, t, m), mn * t / math.sqrt(m)


def build_trajectory(
    pair: OperatorPair,
    x0: Vector,
    S: float,
    points: int,
    tol: float,
    exact_flow: ExactFlow | None = None,
) -> TrajectoryGrid:
    """Flow samples on an evenly spaced grid of [0, S].

    Without a closed form this is a single constant-step run with S/m steps,
    sampled every m/(points-1) iterations; its distance to the flow at grid
    times is at most minnorm * S / sqrt(m).
    """
    if points < 2:
        raise InvalidInput(f"a trajectory grid needs at least 2 points, got {points}")
    if not S > 0.0:
        raise InvalidInput(f"horizon must be positive, got {S}")
    pair.A.require_domain(x0)
    mn, _ = min_norm(pair, x0)
    times = np.linspace(0.0, S, points)
    if exact_flow is not None:
        pts = np.array([exact_flow(x0, float(t)) for t in times])
        return TrajectoryGrid(times=times, points=pts, certified_error=0.0, lipschitz=mn)

    cells = points - 1
    m = required_m(mn, S, tol, pair.Theta)
    stride = max(1, math.ceil(m / cells))
    m = stride * cells
    if m > settings.max_flow_steps:
        raise BudgetExceeded(f"trajectory to tolerance {tol} needs m={m} steps", required=m)
    h = S / m
    pts = np.empty((points, pair.dim))
    pts[0] = x0
    x = x0
    for j in range(1, points):
        x = _run_constant(pair, x, h, stride)
        pts[j] = x
    certified = mn * S / math.sqrt(m)
    logger.debug(f"trajectory on [0, {S}] with m={m}, certified error {certified:.3e}")
    return TrajectoryGrid(times=times, points=pts, certified_error=certified, lipschitz=mn)


def benilan_defect(
    pair: OperatorPair,
    grid: TrajectoryGrid,
    x: Vector,
    y: Vector,
    s: float,
    t: float,
) -> float:
    """||u(t)-x||^2 - ||u(s)-x||^2 - 2 int_s^t <x-u(r), y> dr (trapezoidal)."""
    gap = pair.A.member_gap(x, y - pair.B(x))
    if gap > gap_tolerance(x) * (1.0 + norm(y)):
        raise MembershipError(f"y is not in (A+B)x: membership gap {gap:.3e}")
    if s > t:
        raise InvalidInput(f"need s <= t, got s={s}, t={t}")
    i, j = grid.index_of(s), grid.index_of(t)
    if i == j:
        return 0.0
    u = grid.points[i : j + 1]
    integrand = (x - u) @ y
    integral = float(trapezoid(integrand, grid.times[i : j + 1]))
    end, start = u[-1] - x, u[0] - x
    return inner(end, end) - inner(start, start) - 2.0 * integral


def benilan_budget(grid: TrajectoryGrid, x: Vector, y: Vector, s: float, t: float) -> float:
    """Certification plus quadrature allowance for ``benilan_defect``."""
    i, j = grid.index_of(s), grid.index_of(t)
    delta = grid.certified_error
    ny = norm(y)
    length = t - s
    dist_t = distance(grid.points[j], x)
    dist_s = distance(grid.points[i], x)
    certification = 2.0 * delta * (dist_t + dist_s) + 2.0 * delta**2 + 2.0 * length * ny * delta
    quadrature = 0.5 * length * ny * grid.lipschitz * grid.spacing
    roundoff = 1e-12 * (1.0 + dist_t**2 + dist_s**2 + length * ny * (dist_t + dist_s))
    return certification + quadrature + roundoff


def lipschitz_defect(grid: TrajectoryGrid, minnorm: float) -> float:
    """max over grid pairs of ||u(t)-u(s)|| - minnorm |t-s|."""
    dist = cdist(grid.points, grid.points)
    dt = np.abs(grid.times[:, None] - grid.times[None, :])
    return float((dist - minnorm * dt).max())


def minnorm_profile(pair: OperatorPair, grid: TrajectoryGrid) -> List[float]:
    return [min_norm(pair, p)[0] for p in grid.points]


def profile_slack(pair: OperatorPair, grid: TrajectoryGrid, profile: Sequence[float]) -> float:
    """Allowed rise of the min-norm profile; inf when it cannot be bounded on an approximate grid."""
    floor = 1e-9 * (1.0 + max(profile, default=0.0))
    if grid.certified_error == 0.0:
        return floor
    return 2.0 * (1.0 / pair.B.theta + pair.A.selection_lipschitz) * grid.certified_error + floor


def profile_violation(profile: Sequence[float]) -> float:
    """Largest increase p_j - p_i over i < j (<= 0 for a nonincreasing profile)."""
    values = np.asarray(profile, dtype=np.float64)
    if values.shape[0] < 2:
        return 0.0
    running_min = np.minimum.accumulate(values)[:-1]
    return float((values[1:] - running_min).max())
