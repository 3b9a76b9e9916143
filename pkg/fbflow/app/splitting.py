"""Step-size schedules, error sequences and the forward-backward driver."""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import zeta

from ..config import settings
from .errors import BudgetExceeded, InvalidInput, ScheduleClassError, StepRangeError
from .operators import OperatorPair, check_step, fb_step
from .vectorspace import Vector, as_vector, format_vector, norm

logger = logging.getLogger(__name__)


class ScheduleKind(str, Enum):
    CONSTANT = "constant"
    POWER = "power"
    EXPLICIT = "explicit"


class _Neumaier:
    """Running compensated sum."""

    __slots__ = ("total", "comp")

    def __init__(self) -> None:
        self.total = 0.0
        self.comp = 0.0

    def add(self, value: float) -> None:
        t = self.total + value
        if abs(self.total) >= abs(value):
            self.comp += (self.total - t) + value
        else:
            self.comp += (value - t) + self.total
        self.total = t

    @property
    def value(self) -> float:
        return self.total + self.comp


class StepSchedule:
    """Step sizes lambda_1, lambda_2, ... (1-indexed) with cached prefix sums.

    sigma(k) = sum_{i<=k} lambda_i and tau(k) = sum_{i<=k} lambda_i^2; both
    caches grow on demand and are shared between threads behind a lock.
    """

    _MIN_CHUNK = 4096

    def __init__(
        self,
        kind: ScheduleKind,
        *,
        lam: float | None = None,
        count: int | None = None,
        c: float | None = None,
        p: float | None = None,
        values: Sequence[float] | None = None,
    ) -> None:
        self.kind = ScheduleKind(kind)
        self.lam = lam
        self.count = count
        self.c = c
        self.p = p
        self.values: np.ndarray | None = None
        if self.kind is ScheduleKind.CONSTANT:
            if lam is None or not lam > 0.0 or not math.isfinite(lam):
                raise InvalidInput(f"constant schedule needs a positive step, got {lam}")
            if count is not None and count < 0:
                raise InvalidInput(f"constant schedule count must be >= 0, got {count}")
        elif self.kind is ScheduleKind.POWER:
            if c is None or p is None or not c > 0.0 or not p > 0.0:
                raise InvalidInput(f"power schedule needs c > 0 and p > 0, got c={c}, p={p}")
        else:
            arr = np.asarray(values if values is not None else [], dtype=np.float64)
            if arr.ndim != 1 or not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
                raise InvalidInput("explicit schedule needs a list of positive finite steps")
            arr.setflags(write=False)
            self.values = arr

        self._lock = threading.Lock()
        self._sigma = np.zeros(1)
        self._tau = np.zeros(1)
        self._sigma_acc = _Neumaier()
        self._tau_acc = _Neumaier()
        self._last_nu: Tuple[float, int] | None = None

    @classmethod
    def constant(cls, lam: float, count: int | None = None) -> "StepSchedule":
        return cls(ScheduleKind.CONSTANT, lam=float(lam), count=count)

    @classmethod
    def power(cls, c: float, p: float) -> "StepSchedule":
        return cls(ScheduleKind.POWER, c=float(c), p=float(p))

    @classmethod
    def explicit(cls, values: Sequence[float]) -> "StepSchedule":
        return cls(ScheduleKind.EXPLICIT, values=values)

    def __repr__(self) -> str:
        if self.kind is ScheduleKind.CONSTANT:
            return f"StepSchedule.constant({self.lam}, count={self.count})"
        if self.kind is ScheduleKind.POWER:
            return f"StepSchedule.power({self.c}, {self.p})"
        return f"StepSchedule.explicit(<{len(self.values)} steps>)"

    # -- classification -------------------------------------------------

    @property
    def length(self) -> int | None:
        """Number of steps for finite schedules, None when infinite."""
        if self.kind is ScheduleKind.CONSTANT:
            return self.count
        if self.kind is ScheduleKind.EXPLICIT:
            return int(self.values.shape[0])
        return None

    @property
    def in_l1(self) -> bool:
        if self.kind is ScheduleKind.POWER:
            return self.p > 1.0
        return self.length is not None

    @property
    def in_l2(self) -> bool:
        if self.kind is ScheduleKind.POWER:
            return self.p > 0.5
        return self.length is not None

    @property
    def total(self) -> float:
        """Sum of all steps (inf outside l1)."""
        if not self.in_l1:
            return math.inf
        if self.kind is ScheduleKind.POWER:
            return self.c * float(zeta(self.p, 1.0))
        if self.kind is ScheduleKind.CONSTANT:
            return self.lam * self.count
        return math.fsum(self.values)

    @property
    def is_nonincreasing(self) -> bool:
        if self.kind is ScheduleKind.EXPLICIT:
            return bool(np.all(np.diff(self.values) <= 0.0))
        return True

    # -- raw steps ------------------------------------------------------

    def _values_at(self, idx: np.ndarray) -> np.ndarray:
        if self.kind is ScheduleKind.CONSTANT:
            return np.full(idx.shape, self.lam)
        if self.kind is ScheduleKind.POWER:
            return self.c * idx.astype(np.float64) ** (-self.p)
        return self.values[idx - 1]

    def _check_index(self, k: int, *, allow_zero: bool) -> None:
        lowest = 0 if allow_zero else 1
        if k < lowest:
            raise InvalidInput(f"schedule index must be >= {lowest}, got {k}")
        if self.length is not None and k > self.length:
            raise InvalidInput(f"schedule has {self.length} steps, index {k} requested")

    def step(self, k: int) -> float:
        self._check_index(k, allow_zero=False)
        return float(self._values_at(np.array([k]))[0])

    def steps(self, n: int) -> np.ndarray:
        """lambda_1 .. lambda_n."""
        if n == 0:
            return np.zeros(0)
        self._check_index(n, allow_zero=False)
        return self._values_at(np.arange(1, n + 1))

    # -- prefix caches --------------------------------------------------

    def _ensure(self, n: int) -> None:
        if n < self._sigma.shape[0]:
            return
        if n > settings.max_schedule_terms:
            raise BudgetExceeded(
                f"schedule prefix of {n} terms exceeds the budget of {settings.max_schedule_terms}",
                required=n,
            )
        with self._lock:
            cached = self._sigma.shape[0] - 1
            while cached < n:
                size = max(self._MIN_CHUNK, cached, n - cached)
                if self.length is not None:
                    size = min(size, self.length - cached)
                    if size <= 0:
                        break
                lam = self._values_at(np.arange(cached + 1, cached + size + 1))
                sq = lam * lam
                sigma = self._sigma_acc.value + np.cumsum(lam)
                tau = self._tau_acc.value + np.cumsum(sq)
                self._sigma_acc.add(math.fsum(lam))
                self._tau_acc.add(math.fsum(sq))
                # the last entry of each chunk is pinned to the compensated total
                sigma[-1] = self._sigma_acc.value
                tau[-1] = self._tau_acc.value
                self._sigma = np.concatenate([self._sigma, sigma])
                self._tau = np.concatenate([self._tau, tau])
                cached += size

    def sigma(self, k: int) -> float:
        self._check_index(k, allow_zero=True)
        self._ensure(k)
        return float(self._sigma[k])

    def tau(self, k: int) -> float:
        self._check_index(k, allow_zero=True)
        self._ensure(k)
        return float(self._tau[k])

    def sigma_prefix(self, n: int) -> np.ndarray:
        """sigma_0 .. sigma_n."""
        self._check_index(n, allow_zero=True)
        self._ensure(n)
        return self._sigma[: n + 1].copy()

    def tau_prefix(self, n: int) -> np.ndarray:
        self._check_index(n, allow_zero=True)
        self._ensure(n)
        return self._tau[: n + 1].copy()

    # -- time <-> index -------------------------------------------------

    def nu(self, t: float) -> int:
        """max{n : sigma_n <= t}."""
        if not t >= 0.0 or not math.isfinite(t):
            raise InvalidInput(f"nu needs a finite t >= 0, got {t}")
        if self.in_l1 and t >= self.total:
            raise ScheduleClassError(
                f"t={t} is beyond the reachable horizon {self.total} of a summable schedule"
            )
        last = self._last_nu
        if last is not None and last[0] == t:
            return last[1]
        n = max(self._sigma.shape[0] - 1, 1)
        while self._sigma[-1] <= t:
            if self.length is not None and self._sigma.shape[0] - 1 >= self.length:
                break
            n *= 2
            self._ensure(n)
        result = int(np.searchsorted(self._sigma, t, side="right")) - 1
        self._last_nu = (t, result)
        return result

    def rho(self, t: float) -> float:
        """sup{lambda_n : n >= nu(t) - 1}, starting at index 1 at the latest."""
        start = max(self.nu(t) - 1, 1)
        if self.kind is ScheduleKind.EXPLICIT:
            if start > self.length:
                return 0.0
            return float(self.values[start - 1 :].max())
        if self.kind is ScheduleKind.CONSTANT:
            if self.count is not None and start > self.count:
                return 0.0
            return float(self.lam)
        return float(self.c * start ** (-self.p))

    def tail_tau(self, n: int) -> float:
        """Certified upper bound on sum_{i>n} lambda_i^2."""
        if not self.in_l2:
            raise ScheduleClassError(f"{self!r} is not square-summable, its tau tail is infinite")
        if n < 0:
            raise InvalidInput(f"tail index must be >= 0, got {n}")
        if self.kind is ScheduleKind.POWER:
            if n == 0:
                return self.c**2 + self.tail_tau(1)
            return self.c**2 * n ** (1.0 - 2.0 * self.p) / (2.0 * self.p - 1.0)
        if n >= self.length:
            return 0.0
        if self.kind is ScheduleKind.CONSTANT:
            return (self.length - n) * self.lam**2
        return math.fsum(self.values[n:] ** 2)

    def max_step(self, n: int) -> Tuple[float, int]:
        """Largest of lambda_1..lambda_n and its (1-based) index."""
        lam = self.steps(n)
        if lam.size == 0:
            return 0.0, 0
        i = int(np.argmax(lam))
        return float(lam[i]), i + 1


@dataclass(frozen=True)
class ErrorSequence:
    """Perturbations eps_k entering x_k = J(E(x_{k-1}) + lambda_k eps_k)."""

    kind: str
    dim: int
    scale: float = 0.0
    decay: float = 2.0
    direction: Vector | None = None
    values: Tuple[Vector, ...] = ()

    @classmethod
    def none(cls, dim: int) -> "ErrorSequence":
        return cls(kind="none", dim=dim)

    @classmethod
    def power_decay(cls, scale: float, decay: float, direction: Sequence[float]) -> "ErrorSequence":
        d = as_vector(direction)
        return cls(kind="power", dim=d.shape[0], scale=float(scale), decay=float(decay), direction=d)

    @classmethod
    def explicit(cls, values: Sequence[Sequence[float]]) -> "ErrorSequence":
        vecs = tuple(as_vector(v) for v in values)
        if not vecs:
            raise InvalidInput("explicit error sequence needs at least one vector")
        dims = {v.shape[0] for v in vecs}
        if len(dims) != 1:
            raise InvalidInput(f"explicit errors have mixed dimensions {sorted(dims)}")
        return cls(kind="explicit", dim=dims.pop(), values=vecs)

    @property
    def is_zero(self) -> bool:
        return self.kind == "none" or (self.kind == "power" and self.scale == 0.0)

    @property
    def summable(self) -> bool:
        return self.is_zero or self.kind == "explicit" or self.decay > 1.0

    def eps(self, k: int) -> Vector | None:
        if k < 1:
            raise InvalidInput(f"error index must be >= 1, got {k}")
        if self.is_zero:
            return None
        if self.kind == "power":
            return self.scale * k ** (-self.decay) * self.direction
        if k <= len(self.values):
            return self.values[k - 1]
        return None

    def norms(self, n: int) -> np.ndarray:
        """||eps_1|| .. ||eps_n||."""
        if self.is_zero or n == 0:
            return np.zeros(n)
        if self.kind == "power":
            k = np.arange(1, n + 1, dtype=np.float64)
            return abs(self.scale) * k ** (-self.decay) * norm(self.direction)
        out = np.zeros(n)
        m = min(n, len(self.values))
        out[:m] = [norm(v) for v in self.values[:m]]
        return out

    def cumulative(self, schedule: StepSchedule, k: int) -> float:
        """e_k = sum_{i<=k} lambda_i ||eps_i||."""
        if k == 0:
            return 0.0
        return math.fsum(schedule.steps(k) * self.norms(k))


@dataclass
class IterationTrace:
    points: np.ndarray
    steps: np.ndarray
    errors: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray
    e: np.ndarray
    residual_gaps: np.ndarray
    schedule: StepSchedule = field(repr=False)
    error_sequence: ErrorSequence = field(repr=False)

    @property
    def K(self) -> int:
        return int(self.steps.shape[0])

    def x(self, k: int) -> Vector:
        return self.points[k]

    def replay(self, pair: OperatorPair, k: int) -> Vector:
        """Recompute x_k from x_{k-1}."""
        if not 1 <= k <= self.K:
            raise InvalidInput(f"replay index must be in [1, {self.K}], got {k}")
        eps = self.error_sequence.eps(k)
        x_next, _ = fb_step(pair, float(self.steps[k - 1]), self.points[k - 1], eps)
        return x_next

    @property
    def max_residual(self) -> float:
        return float(self.residual_gaps.max()) if self.K else 0.0

    def rows(self, digits: int = 17) -> List[List[str]]:
        fmt = f".{digits}g"
        out = []
        for k in range(self.K + 1):
            lam = format(float(self.steps[k - 1]), fmt) if k else ""
            gap = format(float(self.residual_gaps[k - 1]), fmt) if k else ""
            out.append(
                [
                    str(k),
                    lam,
                    format(float(self.sigma[k]), fmt),
                    format(float(self.tau[k]), fmt),
                    format(float(self.e[k]), fmt),
                    format_vector(self.points[k], digits),
                    gap,
                ]
            )
        return out


TRACE_COLUMNS = ["k", "lambda_k", "sigma_k", "tau_k", "e_k", "x", "residual_gap"]


def validate_steps(pair: OperatorPair, schedule: StepSchedule, K: int) -> np.ndarray:
    lam = schedule.steps(K)
    bad = np.nonzero(~(lam > 0.0) | (lam > pair.Theta * (1.0 + settings.step_rtol)))[0]
    if bad.size:
        index = int(bad[0]) + 1
        raise StepRangeError(
            f"step lambda_{index} = {lam[bad[0]]} outside (0, Theta={pair.Theta}]", index=index
        )
    return lam


def run_fb(
    pair: OperatorPair,
    schedule: StepSchedule,
    errors: ErrorSequence,
    x0: Vector,
    K: int,
) -> IterationTrace:
    """x_k = J_{lambda_k}(E_{lambda_k}(x_{k-1}) + lambda_k eps_k), k = 1..K."""
    if K < 0:
        raise InvalidInput(f"K must be >= 0, got {K}")
    if x0.shape != (pair.dim,):
        raise InvalidInput(f"x0 has shape {x0.shape}, expected ({pair.dim},)")
    if errors.dim != pair.dim:
        raise InvalidInput(f"error sequence lives in R^{errors.dim}, problem in R^{pair.dim}")
    lam = validate_steps(pair, schedule, K)

    points = np.empty((K + 1, pair.dim))
    errs = np.zeros((K, pair.dim))
    gaps = np.zeros(K)
    points[0] = x0
    x = x0
    for k in range(1, K + 1):
        step = float(lam[k - 1])
        eps = errors.eps(k)
        if eps is not None:
            errs[k - 1] = eps
        x_next, z = fb_step(pair, step, x, eps)
        gaps[k - 1] = pair.A.member_gap(x_next, (z - x_next) / step)
        points[k] = x_next
        x = x_next

    weighted = lam * errors.norms(K)
    e = np.concatenate([[0.0], np.cumsum(weighted)])
    logger.debug(f"run_fb finished K={K}, max residual gap {gaps.max() if K else 0.0:.3e}")
    points.setflags(write=False)
    return IterationTrace(
        points=points,
        steps=lam,
        errors=errs,
        sigma=schedule.sigma_prefix(K),
        tau=schedule.tau_prefix(K),
        e=e,
        residual_gaps=gaps,
        schedule=schedule,
        error_sequence=errors,
    )


def fb_orbit(pair: OperatorPair, schedule: StepSchedule, x: Vector, start: int, stop: int) -> Vector:
    """Apply T_{lambda_i} for i = start+1 .. stop, exact steps."""
    if stop <= start:
        return x
    lam = schedule.steps(stop)[start:]
    for i, step in enumerate(lam, start=start + 1):
        check_step(float(step), pair.Theta, index=i)
        x, _ = fb_step(pair, float(step), x, None)
    return x
