"""Infinite-horizon comparison of the flow and the forward-backward sequence.

Two nonexpansive evolution systems live here: the semigroup U_S(t, s) =
S(t - s) and the schedule product U_T(t, s) = T_{lambda_nu(t)} o ... o
T_{lambda_(nu(s)+1)}.  Each trajectory of one is an almost-orbit of the
other; the sweep below measures the defect on a finite h-grid and compares
it with the a-priori bound.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config import settings
from .errors import BudgetExceeded, InvalidInput, ScheduleClassError
from .flow import FlowQuery, approximate_flow, exp_formula, reference_flow
from .operators import OperatorPair, PointSampler, min_norm
from .problems import ExactFlow, ProblemInstance
from .splitting import ErrorSequence, StepSchedule, fb_orbit, run_fb
from .vectorspace import Vector, distance, format_vector

logger = logging.getLogger(__name__)

SEMIGROUP_FLOW = "semigroup_flow"
SCHEDULE_PRODUCT = "schedule_product"

FLOW_IN_SCHEDULE = "S_vs_T"
SCHEDULE_IN_FLOW = "T_vs_S"
DIRECTIONS = (FLOW_IN_SCHEDULE, SCHEDULE_IN_FLOW)

FINITE_DIMENSION_NOTE = "weak and strong convergence coincide in finite dimension"


def _check_times(t: float, s: float) -> None:
    if not (math.isfinite(t) and math.isfinite(s)) or s < 0.0 or t < s:
        raise InvalidInput(f"evolution times need 0 <= s <= t, got s={s}, t={t}")


def _require_l2_not_l1(schedule: StepSchedule) -> None:
    if schedule.in_l1 or not schedule.in_l2:
        raise ScheduleClassError(f"{schedule!r} must be square-summable and not summable")


class EvolutionSystem(ABC):
    """Two-parameter family U(t, s), 0 <= s <= t."""

    kind: str = ""
    # distance bound of one evaluation to the exact system
    certified_error: float = 0.0

    def __init__(self, pair: OperatorPair) -> None:
        self.pair = pair

    @abstractmethod
    def evaluate(self, t: float, s: float, z: Vector) -> Vector:
        ...

    def __call__(self, t: float, s: float, z: Vector) -> Vector:
        return self.evaluate(t, s, z)

    def aligned_times(self, rng: np.random.Generator, count: int, horizon: float) -> np.ndarray:
        return np.sort(rng.uniform(0.0, horizon, count))


class ScheduleProduct(EvolutionSystem):
    kind = SCHEDULE_PRODUCT

    def __init__(self, pair: OperatorPair, schedule: StepSchedule) -> None:
        _require_l2_not_l1(schedule)
        super().__init__(pair)
        self.schedule = schedule

    def evaluate(self, t: float, s: float, z: Vector) -> Vector:
        _check_times(t, s)
        return fb_orbit(self.pair, self.schedule, z, self.schedule.nu(s), self.schedule.nu(t))

    def aligned_times(self, rng: np.random.Generator, count: int, horizon: float) -> np.ndarray:
        """Breakpoints sigma_n <= horizon, where the cocycle identity is exact."""
        top = self.schedule.nu(horizon)
        idx = np.sort(rng.integers(0, top + 1, count))
        return self.schedule.sigma_prefix(top)[idx]


class SemigroupFlow(EvolutionSystem):
    kind = SEMIGROUP_FLOW

    def __init__(self, pair: OperatorPair, tol: float, exact_flow: ExactFlow | None = None) -> None:
        if not tol > 0.0:
            raise InvalidInput(f"flow tolerance must be positive, got {tol}")
        super().__init__(pair)
        self.tol = tol
        self.exact_flow = exact_flow
        self.certified_error = 0.0 if exact_flow is not None else tol

    def evaluate(self, t: float, s: float, z: Vector) -> Vector:
        _check_times(t, s)
        if t == s:
            return z
        if self.exact_flow is not None:
            return self.exact_flow(z, t - s)
        value, _ = approximate_flow(self.pair, FlowQuery(z, t - s, self.tol))
        return value


def evolution_T(pair: OperatorPair, schedule: StepSchedule, t: float, s: float, x: Vector) -> Vector:
    return ScheduleProduct(pair, schedule).evaluate(t, s, x)


def evolution_S(pair: OperatorPair, t: float, s: float, x: Vector, tol: float) -> Vector:
    """S(t - s) x to within tol; depends on t - s only."""
    return SemigroupFlow(pair, tol).evaluate(t, s, x)


@dataclass(frozen=True)
class AxiomViolations:
    identity: float
    cocycle: float
    nonexpansive: float


def check_evolution_axioms(
    U: EvolutionSystem,
    sampler: PointSampler,
    trials: int,
    rng: np.random.Generator,
    horizon: float = 10.0,
) -> AxiomViolations:
    """Worst violation of U(t,t) = I, the cocycle identity and nonexpansiveness."""
    if trials < 1:
        raise InvalidInput("trials must be >= 1")
    identity = cocycle = 0.0
    nonexpansive = -math.inf
    for _ in range(trials):
        r, s, t = (float(v) for v in U.aligned_times(rng, 3, horizon))
        x, y = sampler(rng), sampler(rng)
        identity = max(identity, distance(U(t, t, x), x))
        cocycle = max(cocycle, distance(U(t, s, U(s, r, x)), U(t, r, x)))
        expansion = distance(U(t, s, x), U(t, s, y)) - distance(x, y)
        nonexpansive = max(nonexpansive, expansion)
    return AxiomViolations(identity=identity, cocycle=cocycle, nonexpansive=nonexpansive)


def almost_orbit_defect(
    phi: Callable[[float], Vector],
    U: EvolutionSystem,
    t: float,
    h_grid: Sequence[float],
) -> float:
    """max_h ||phi(t+h) - U(t+h, t) phi(t)||, a lower estimate of the sup over h >= 0."""
    hs = np.asarray(h_grid, dtype=np.float64)
    if hs.size == 0 or not np.all(np.isfinite(hs)) or np.any(hs < 0.0):
        raise InvalidInput("h grid must be a non-empty list of finite reals >= 0")
    base = phi(t)
    return max(distance(phi(t + float(h)), U(t + float(h), t, base)) for h in hs)


def orbit_bound_value(minnorm: float, rho: float, tail: float) -> float:
    return minnorm * math.sqrt(4.0 * rho * rho + tail)


def almost_orbit_bound(pair: OperatorPair, x: Vector, schedule: StepSchedule, t: float) -> float:
    """|||(A+B)x||| sqrt(4 rho(t)^2 + sum_{i > nu(t)} lambda_i^2)."""
    _require_l2_not_l1(schedule)
    mn, _ = min_norm(pair, x)
    return orbit_bound_value(mn, schedule.rho(t), schedule.tail_tau(schedule.nu(t)))


def geometric_h_grid(delta: float, H: float) -> List[float]:
    """0, delta, 2 delta, 4 delta, ... capped with H."""
    if not delta > 0.0 or not math.isfinite(H) or H < 0.0:
        raise InvalidInput(f"h grid needs delta > 0 and finite H >= 0, got {delta}, {H}")
    grid = [0.0]
    h = delta
    while h < H:
        grid.append(h)
        h *= 2.0
    if H > 0.0:
        grid.append(float(H))
    return grid


@dataclass(frozen=True)
class AlmostOrbitRow:
    t: float
    defect: float
    bound: float
    rho: float
    tail_tau: float
    nu: int
    oracle_budget: float

    @property
    def margin(self) -> float:
        return self.bound - self.defect

    @property
    def rho_from(self) -> int:
        return max(self.nu - 1, 1)

    @property
    def tail_from(self) -> int:
        return self.nu + 1


ALMOST_ORBIT_COLUMNS = [
    "t",
    "defect",
    "bound",
    "margin",
    "rho",
    "tail_tau",
    "nu",
    "rho_from",
    "tail_from",
    "oracle_budget",
    "direction",
]


@dataclass
class AlmostOrbitReport:
    direction: str
    rows: List[AlmostOrbitRow] = field(default_factory=list)

    def violations(self, tol: float = 1e-9) -> List[AlmostOrbitRow]:
        return [r for r in self.rows if r.defect > r.bound + r.oracle_budget + tol * (1.0 + r.bound)]

    @property
    def worst_margin(self) -> float:
        return min((r.margin + r.oracle_budget for r in self.rows), default=math.inf)

    @property
    def bound_decreasing(self) -> bool:
        bounds = [r.bound for r in sorted(self.rows, key=lambda r: r.t)]
        return all(b2 < b1 for b1, b2 in zip(bounds, bounds[1:]))

    def csv_rows(self, digits: int = 17) -> List[List[str]]:
        fmt = f".{digits}g"
        out = []
        for r in self.rows:
            out.append(
                [
                    format(r.t, fmt),
                    format(r.defect, fmt),
                    format(r.bound, fmt),
                    format(r.margin, fmt),
                    format(r.rho, fmt),
                    format(r.tail_tau, fmt),
                    str(r.nu),
                    str(r.rho_from),
                    str(r.tail_from),
                    format(r.oracle_budget, fmt),
                    self.direction,
                ]
            )
        return out


def _flow_samples(
    pair: OperatorPair,
    x: Vector,
    times: Sequence[float],
    tol: float,
    exact_flow: ExactFlow | None,
) -> Dict[float, Tuple[Vector, float]]:
    """S(tau) x with a certified error for every tau, chaining reference segments."""
    ordered = sorted(set(float(t) for t in times))
    if exact_flow is not None:
        return {t: (exact_flow(x, t), 0.0) for t in ordered}
    out: Dict[float, Tuple[Vector, float]] = {}
    current, error, previous = x, 0.0, 0.0
    segment_tol = tol / max(len(ordered), 1)
    for t in ordered:
        if t > previous:
            current, e = reference_flow(pair, current, t - previous, segment_tol)
            # S is nonexpansive, so segment errors add up
            error += e
        out[t] = (current, error)
        previous = t
    return out


def almost_orbit_sweep(
    problem: ProblemInstance,
    schedule: StepSchedule,
    x: Vector,
    t_values: Sequence[float],
    h_grid: Sequence[float],
    direction: str,
    tol: float | None = None,
    jobs: int = 1,
) -> AlmostOrbitReport:
    if direction not in DIRECTIONS:
        raise InvalidInput(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if not t_values:
        raise InvalidInput("almost-orbit sweep needs at least one t")
    pair = problem.pair
    U_T = ScheduleProduct(pair, schedule)
    bounds = {float(t): almost_orbit_bound(pair, x, schedule, float(t)) for t in t_values}
    if tol is None:
        positive = [b for b in bounds.values() if b > 0.0]
        tol = 0.1 * min(positive) if positive else 1e-3

    if direction == FLOW_IN_SCHEDULE:
        needed = [float(t) + float(h) for t in t_values for h in h_grid] + [float(t) for t in t_values]
        samples = _flow_samples(pair, x, needed, tol, problem.exact_flow)
        phi = lambda tau: samples[tau][0]
        U: EvolutionSystem = U_T

        def budget(t: float) -> float:
            return max(samples[t + float(h)][1] for h in h_grid) + samples[t][1]

    else:
        phi = lambda tau: U_T(tau, 0.0, x)
        U = SemigroupFlow(pair, tol, problem.exact_flow)

        def budget(t: float) -> float:
            return U.certified_error

    def row_at(t: float) -> AlmostOrbitRow:
        t = float(t)
        defect = almost_orbit_defect(phi, U, t, h_grid)
        nu = schedule.nu(t)
        return AlmostOrbitRow(
            t=t,
            defect=defect,
            bound=bounds[t],
            rho=schedule.rho(t),
            tail_tau=schedule.tail_tau(nu),
            nu=nu,
            oracle_budget=budget(t),
        )

    # prime the schedule caches before fanning out
    schedule.nu(max(float(t) + float(max(h_grid)) for t in t_values))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(row_at, t_values))
    else:
        rows = [row_at(t) for t in t_values]
    report = AlmostOrbitReport(direction=direction, rows=rows)
    logger.info(
        f"almost-orbit {direction} on {problem.id}: {len(rows)} t values, "
        f"worst margin {report.worst_margin:.3e}"
    )
    return report


@dataclass(frozen=True)
class EquivalenceRow:
    x0: Vector
    zero: Vector
    flow_limit: Vector
    fb_limit: Vector
    flow_certified_error: float
    perturbed_shift: float
    partial: bool

    @property
    def flow_to_zero(self) -> float:
        return distance(self.flow_limit, self.zero)

    @property
    def fb_to_zero(self) -> float:
        return distance(self.fb_limit, self.zero)

    @property
    def limit_gap(self) -> float:
        return distance(self.flow_limit, self.fb_limit)


EQUIVALENCE_COLUMNS = [
    "x0",
    "zero",
    "flow_limit",
    "fb_limit",
    "flow_to_zero",
    "fb_to_zero",
    "limit_gap",
    "perturbed_shift",
    "flow_certified_error",
    "partial",
]


@dataclass
class EquivalenceReport:
    T_max: float
    K_max: int
    rows: List[EquivalenceRow] = field(default_factory=list)
    note: str = FINITE_DIMENSION_NOTE

    @property
    def partial(self) -> bool:
        return any(r.partial for r in self.rows)

    @property
    def worst_zero_distance(self) -> float:
        return max((max(r.flow_to_zero, r.fb_to_zero) for r in self.rows), default=0.0)

    @property
    def worst_gap(self) -> float:
        return max((r.limit_gap for r in self.rows), default=0.0)

    @property
    def worst_shift(self) -> float:
        return max((r.perturbed_shift for r in self.rows), default=0.0)

    def csv_rows(self, digits: int = 17) -> List[List[str]]:
        fmt = f".{digits}g"
        return [
            [
                format_vector(r.x0, digits),
                format_vector(r.zero, digits),
                format_vector(r.flow_limit, digits),
                format_vector(r.fb_limit, digits),
                format(r.flow_to_zero, fmt),
                format(r.fb_to_zero, fmt),
                format(r.limit_gap, fmt),
                format(r.perturbed_shift, fmt),
                format(r.flow_certified_error, fmt),
                "1" if r.partial else "0",
            ]
            for r in self.rows
        ]


def _flow_limit(problem: ProblemInstance, x0: Vector, T_max: float, tol: float) -> Tuple[Vector, float, bool]:
    if problem.exact_flow is not None:
        return problem.exact_flow(x0, T_max), 0.0, False
    try:
        value, _ = approximate_flow(problem.pair, FlowQuery(x0, T_max, tol))
        return value, tol, False
    except BudgetExceeded as exc:
        m = settings.max_flow_steps
        logger.warning(f"{problem.id}: для предела потока нужно m={exc.required}, обрезаем до {m}, отчёт частичный")
        mn, _ = min_norm(problem.pair, x0)
        return exp_formula(problem.pair, x0, T_max, m), mn * T_max / math.sqrt(m), True


def equivalence_experiment(
    problem: ProblemInstance,
    schedule: StepSchedule,
    x0_set: Sequence[Vector],
    T_max: float,
    K_max: int,
    tol: float = 1e-3,
    errors: Optional[ErrorSequence] = None,
) -> EquivalenceReport:
    """Limits of S_t x0 at T_max and of the FB sequence at K_max, against the zero oracle."""
    _require_l2_not_l1(schedule)
    if problem.zero_oracle is None:
        raise InvalidInput(f"{problem.id} has no zero oracle")
    if K_max < 1 or not T_max > 0.0:
        raise InvalidInput(f"need T_max > 0 and K_max >= 1, got {T_max}, {K_max}")
    pair = problem.pair
    report = EquivalenceReport(T_max=T_max, K_max=K_max)
    for x0 in x0_set:
        pair.A.require_domain(x0)
        flow_limit, certified, partial = _flow_limit(problem, x0, T_max, tol)
        exact = run_fb(pair, schedule, ErrorSequence.none(pair.dim), x0, K_max)
        fb_limit = exact.points[-1]
        shift = 0.0
        if errors is not None and not errors.is_zero:
            perturbed = run_fb(pair, schedule, errors, x0, K_max)
            shift = distance(perturbed.points[-1], fb_limit)
        report.rows.append(
            EquivalenceRow(
                x0=x0,
                zero=np.asarray(problem.zero_oracle(x0), dtype=np.float64),
                flow_limit=flow_limit,
                fb_limit=fb_limit,
                flow_certified_error=certified,
                perturbed_shift=shift,
                partial=partial,
            )
        )
    logger.info(
        f"equivalence on {problem.id}: worst distance to zero {report.worst_zero_distance:.3e}, "
        f"worst limit gap {report.worst_gap:.3e} ({report.note})"
    )
    return report
