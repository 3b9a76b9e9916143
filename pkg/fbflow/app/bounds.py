"""Executable a-priori estimates for forward-backward sequences.

Every inequality comes with a function returning its slack (right-hand side
minus left-hand side); nothing here clamps or turns slack into booleans, the
tolerance policy belongs to the caller.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from ..config import settings
from .errors import InvalidInput, StepRangeError
from .operators import OperatorPair, check_step, fb_map, min_norm
from .splitting import IterationTrace
from .vectorspace import Vector, distance, same_dim

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AbgCoefficients:
    alpha: float
    beta: float
    gamma: float
    # gamma * Theta, kept separately so that Theta = inf stays finite
    gamma_theta: float


def abg(lam: float, mu: float, Theta: float) -> AbgCoefficients:
    check_step(lam, Theta)
    check_step(mu, Theta)
    if math.isinf(Theta):
        s = lam + mu
        return AbgCoefficients(alpha=lam / s, beta=mu / s, gamma=0.0, gamma_theta=lam * mu / s)
    D = Theta * (lam + mu) - lam * mu
    gamma = lam * mu / D
    return AbgCoefficients(
        alpha=lam * (Theta - mu) / D,
        beta=mu * (Theta - lam) / D,
        gamma=gamma,
        gamma_theta=gamma * Theta,
    )


def abg_identity_residuals(lam: float, mu: float, Theta: float) -> Tuple[float, float, float]:
    """alpha+beta+gamma-1, alpha*lam+gamma*Theta-lam, beta*mu+gamma*Theta-mu."""
    c = abg(lam, mu, Theta)
    return (
        c.alpha + c.beta + c.gamma - 1.0,
        c.alpha * lam + c.gamma_theta - lam,
        c.beta * mu + c.gamma_theta - mu,
    )


def lemma_gap(
    pair: OperatorPair,
    lam: float,
    mu: float,
    x: Vector,
    y: Vector,
    eps: Vector,
    eta: Vector,
) -> float:
    """Slack of the one-step comparison between T_lam^eps x and T_mu^eta y."""
    same_dim(x, y)
    same_dim(eps, eta)
    c = abg(lam, mu, pair.Theta)
    tx = fb_map(pair, lam, x, eps)
    ty = fb_map(pair, mu, y, eta)
    rhs = (
        c.alpha * distance(tx, y)
        + c.beta * distance(x, ty)
        + c.gamma * distance(x, y)
        + c.gamma_theta * distance(eps, eta)
    )
    return float(rhs - distance(tx, ty))


def _c_squared(sigma_k: float, sigma_l: float, tau_k: float, tau_l: float) -> float:
    return (sigma_k - sigma_l) ** 2 + tau_k + tau_l


def c_value(sigma_k: float, sigma_l: float, tau_k: float, tau_l: float) -> float:
    """sqrt((sigma_k - sigma_hat_l)^2 + tau_k + tau_hat_l)."""
    if tau_k < 0.0 or tau_l < 0.0:
        raise InvalidInput(f"tau prefixes must be nonnegative, got {tau_k}, {tau_l}")
    return math.sqrt(_c_squared(sigma_k, sigma_l, tau_k, tau_l))


def c_recurrence_residuals(
    lambda_k: float,
    mu_l: float,
    sigma_k: float,
    sigma_l: float,
    tau_k: float,
    tau_l: float,
) -> Tuple[float, float, float]:
    """Residuals of the three one-index-down identities for c^2.

    c2[k, l-1]   = c2[k, l] + 2 mu_l d
    c2[k-1, l]   = c2[k, l] - 2 lambda_k d
    c2[k-1, l-1] = c2[k, l] + 2 (mu_l - lambda_k) d - 2 lambda_k mu_l
    with d = sigma_k - sigma_hat_l; each residual is relative to max(1, c2[k, l]).
    """
    d = sigma_k - sigma_l
    c2 = _c_squared(sigma_k, sigma_l, tau_k, tau_l)
    scale = max(1.0, c2)
    down_l = _c_squared(sigma_k, sigma_l - mu_l, tau_k, tau_l - mu_l**2)
    down_k = _c_squared(sigma_k - lambda_k, sigma_l, tau_k - lambda_k**2, tau_l)
    down_both = _c_squared(sigma_k - lambda_k, sigma_l - mu_l, tau_k - lambda_k**2, tau_l - mu_l**2)
    return (
        (down_l - (c2 + 2.0 * mu_l * d)) / scale,
        (down_k - (c2 - 2.0 * lambda_k * d)) / scale,
        (down_both - (c2 + 2.0 * (mu_l - lambda_k) * d - 2.0 * lambda_k * mu_l)) / scale,
    )


def convex_combination_identity(
    coeffs: AbgCoefficients,
    lambda_k: float,
    mu_l: float,
    c_kl: float,
    c_k_lm1: float,
    c_km1_l: float,
    c_km1_lm1: float,
) -> float:
    """alpha c2[k,l-1] + beta c2[k-1,l] + gamma c2[k-1,l-1] - (c2[k,l] - 2 gamma lambda_k mu_l)."""
    combo = coeffs.alpha * c_k_lm1**2 + coeffs.beta * c_km1_l**2 + coeffs.gamma * c_km1_lm1**2
    return combo - (c_kl**2 - 2.0 * coeffs.gamma * lambda_k * mu_l)


def kobayashi_rhs(
    x0: Vector,
    xhat0: Vector,
    u: Vector,
    minnorm_u: float,
    sigma_k: float,
    sigma_l: float,
    tau_k: float,
    tau_l: float,
    e_k: float,
    e_l: float,
) -> float:
    return (
        distance(x0, u)
        + distance(xhat0, u)
        + minnorm_u * c_value(sigma_k, sigma_l, tau_k, tau_l)
        + e_k
        + e_l
    )


@dataclass(frozen=True)
class BoundRecord:
    lhs: float
    rhs: float
    slack: float
    k: int
    l: int


@dataclass
class BoundReport:
    """Per-row worst (k, l) records of an all-pairs bound check."""

    problem: str = ""
    seed: int | None = None
    scale: float = 0.0
    records: List[BoundRecord] = field(default_factory=list)

    def append(self, record: BoundRecord) -> None:
        self.records.append(record)

    @property
    def worst(self) -> BoundRecord:
        if not self.records:
            raise InvalidInput("empty bound report")
        return min(self.records, key=lambda r: (r.slack, r.k, r.l))

    @property
    def min_slack(self) -> float:
        return self.worst.slack

    @property
    def lhs(self) -> float:
        return self.worst.lhs

    @property
    def rhs(self) -> float:
        return self.worst.rhs

    def passed(self, rtol: float = 1e-9) -> bool:
        return self.min_slack >= -rtol * (1.0 + self.scale)

    def rows(self, digits: int = 17) -> List[List[str]]:
        fmt = f".{digits}g"
        seed = "" if self.seed is None else str(self.seed)
        return [
            [format(r.lhs, fmt), format(r.rhs, fmt), format(r.slack, fmt), str(r.k), str(r.l), seed, self.problem]
            for r in sorted(self.records, key=lambda r: r.k)
        ]


BOUND_COLUMNS = ["lhs", "rhs", "slack", "k", "l", "seed", "problem"]


def _check_trace_steps(pair: OperatorPair, trace: IterationTrace, label: str) -> None:
    if trace.K == 0:
        return
    bad = np.nonzero(trace.steps > pair.Theta * (1.0 + settings.step_rtol))[0]
    if bad.size:
        index = int(bad[0]) + 1
        raise StepRangeError(
            f"{label} step lambda_{index} = {trace.steps[bad[0]]} exceeds Theta = {pair.Theta}",
            index=index,
        )


def _truncate(trace_len: int, label: str) -> int:
    cap = settings.max_pairs
    if trace_len - 1 > cap:
        logger.warning(f"{label} has {trace_len - 1} steps, all-pairs check capped at {cap}")
        return cap + 1
    return trace_len


def verify_kobayashi(
    pair: OperatorPair,
    trace1: IterationTrace,
    trace2: IterationTrace,
    u: Vector,
    *,
    problem: str = "",
    seed: int | None = None,
    jobs: int = 1,
) -> BoundReport:
    """Check ||x_k - xhat_l|| <= Kobayashi rhs on every index pair (k, l)."""
    _check_trace_steps(pair, trace1, "first trace")
    _check_trace_steps(pair, trace2, "second trace")
    mn, _ = min_norm(pair, u)
    n1 = _truncate(trace1.points.shape[0], "first trace")
    n2 = _truncate(trace2.points.shape[0], "second trace")
    X, Y = trace1.points[:n1], trace2.points[:n2]
    base = distance(X[0], u) + distance(Y[0], u)
    s1, t1, e1 = trace1.sigma[:n1], trace1.tau[:n1], trace1.e[:n1]
    s2, t2, e2 = trace2.sigma[:n2], trace2.tau[:n2], trace2.e[:n2]

    def block(rows: np.ndarray) -> Tuple[List[BoundRecord], float]:
        lhs = cdist(X[rows], Y)
        c = np.sqrt((s1[rows, None] - s2[None, :]) ** 2 + t1[rows, None] + t2[None, :])
        rhs = base + mn * c + e1[rows, None] + e2[None, :]
        slack = rhs - lhs
        cols = np.argmin(slack, axis=1)
        out = [
            BoundRecord(
                lhs=float(lhs[i, j]), rhs=float(rhs[i, j]), slack=float(slack[i, j]), k=int(k), l=int(j)
            )
            for i, (k, j) in enumerate(zip(rows, cols))
        ]
        return out, float(np.abs(rhs).max())

    chunks = [c for c in np.array_split(np.arange(n1), max(1, min(jobs, n1))) if c.size]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(block, chunks))
    else:
        results = [block(c) for c in chunks]

    report = BoundReport(problem=problem, seed=seed)
    for records, scale in results:
        for r in records:
            report.append(r)
        report.scale = max(report.scale, scale)
    worst = report.worst
    logger.info(
        f"kobayashi check {problem or '<pair>'}: {n1}x{n2} pairs, "
        f"min slack {worst.slack:.3e} at (k={worst.k}, l={worst.l})"
    )
    return report
