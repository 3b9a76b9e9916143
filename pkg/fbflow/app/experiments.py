"""Experiment handlers behind the CLI subcommands.

Every handler takes a prepared ``Context`` and returns the criteria it
declares (each exactly once) plus the CSV artifacts it wrote.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np
from pydantic import ValidationError

from ..config import settings
from .asymptotics import (
    ALMOST_ORBIT_COLUMNS,
    DIRECTIONS,
    EQUIVALENCE_COLUMNS,
    ScheduleProduct,
    almost_orbit_sweep,
    check_evolution_axioms,
    equivalence_experiment,
    geometric_h_grid,
)
from .bounds import (
    BOUND_COLUMNS,
    abg,
    abg_identity_residuals,
    c_recurrence_residuals,
    c_value,
    convex_combination_identity,
    lemma_gap,
    verify_kobayashi,
)
from .dependencies import get_problem, make_rng, run_blocks
from .errors import ConfigError, FBFlowError
from .export import write_csv, write_summary
from .flow import (
    GRID_COLUMNS,
    benilan_budget,
    benilan_defect,
    build_trajectory,
    cauchy_bound,
    exp_formula,
    hybrid_bound,
    lipschitz_defect,
    minnorm_profile,
    pc_interpolant,
    profile_slack,
    profile_violation,
    um_vm_gap_bound,
)
from .models import Criterion, ExperimentConfig, RunSummary
from .operators import OperatorPair, min_norm
from .problems import ProblemInstance
from .splitting import TRACE_COLUMNS, ErrorSequence, StepSchedule, run_fb
from .vectorspace import Vector, as_vector, check_kappa_inequality, distance, format_vector, inner

logger = logging.getLogger(__name__)


@dataclass
class Context:
    config: ExperimentConfig
    problem: ProblemInstance
    schedule: StepSchedule
    schedule_hat: StepSchedule
    errors: ErrorSequence
    errors_hat: ErrorSequence
    x0: Vector
    x0_hat: Vector
    u: Vector
    out_dir: Path
    jobs: int

    @property
    def pair(self) -> OperatorPair:
        return self.problem.pair

    @property
    def digits(self) -> int:
        return settings.csv_digits


@dataclass
class Outcome:
    criteria: List[Criterion] = field(default_factory=list)
    artifacts: Dict[str, str] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    partial: bool = False

    def check(self, name: str, worst: float, threshold: float, passed: bool, detail: str = "") -> None:
        status = "verified" if passed else "failed"
        self.criteria.append(
            Criterion(name=name, passed=bool(passed), worst=worst, threshold=threshold, detail=detail, status=status)
        )

    def at_most(self, name: str, worst: float, threshold: float, detail: str = "") -> None:
        self.check(name, worst, threshold, worst <= threshold, detail)

    def at_least(self, name: str, worst: float, threshold: float, detail: str = "") -> None:
        self.check(name, worst, threshold, worst >= threshold, detail)

    def skipped(self, name: str, reason: str) -> None:
        self.criteria.append(
            Criterion(name=name, passed=True, worst=0.0, threshold=0.0, detail=f"skipped: {reason}", status="skipped")
        )

    def csv(self, ctx: Context, name: str, columns: List[str], rows) -> None:
        path = ctx.out_dir / name
        self.artifacts[str(path)] = write_csv(path, columns, rows)


Handler = Callable[[Context], Outcome]
HANDLERS: Dict[str, Handler] = {}


def experiment(name: str) -> Callable[[Handler], Handler]:
    def register(fn: Handler) -> Handler:
        HANDLERS[name] = fn
        return fn

    return register


def prepare(config: ExperimentConfig, out_dir: str | Path | None = None, jobs: int | None = None) -> Context:
    """Resolve ids and build every object the experiment needs; ConfigError on failure."""
    try:
        problem = get_problem(config.problem, config.params)
        Theta = problem.Theta
        schedule = config.schedule.build(Theta)
        schedule_hat = (config.schedule_hat or config.schedule).build(Theta)
        errors = config.errors.build(problem.dim)
        errors_hat = (config.errors_hat or config.errors).build(problem.dim)
        x0 = as_vector(config.x0) if config.x0 is not None else problem.default_x0
        if config.x0_hat is not None:
            x0_hat = as_vector(config.x0_hat)
        else:
            x0_hat = as_vector(problem.sample_domain(make_rng(config.seed, 9)))
        if config.u is not None:
            u = as_vector(config.u)
        elif problem.zero_oracle is not None:
            u = as_vector(problem.zero_oracle(x0))
        else:
            u = x0
        for point in (x0, x0_hat, u):
            problem.pair.A.require_domain(point)
    except (ValueError, ValidationError) as exc:
        raise ConfigError(f"cannot build experiment {config.experiment!r}: {exc}") from exc
    target = Path(out_dir or config.output or settings.output_dir)
    return Context(
        config=config,
        problem=problem,
        schedule=schedule,
        schedule_hat=schedule_hat,
        errors=errors,
        errors_hat=errors_hat,
        x0=x0,
        x0_hat=x0_hat,
        u=u,
        out_dir=target,
        jobs=jobs or config.jobs or settings.jobs,
    )


@experiment("simulate")
def simulate(ctx: Context) -> Outcome:
    out = Outcome()
    pair, K = ctx.pair, ctx.config.k
    trace = run_fb(pair, ctx.schedule, ctx.errors, ctx.x0, K)
    out.csv(ctx, "trace.csv", TRACE_COLUMNS, trace.rows(ctx.digits))

    scale = 1.0 + float(np.abs(trace.points).max())
    min_step = float(trace.steps.min()) if K else 1.0
    gap_threshold = settings.member_gap_tol * scale / min(1.0, min_step)
    out.at_most("residual_gap", trace.max_residual, gap_threshold)

    replay = max((distance(trace.replay(pair, k), trace.x(k)) for k in range(1, K + 1)), default=0.0)
    out.at_most("replay_exact", replay, 0.0)

    if ctx.problem.zero_oracle is None:
        out.skipped("fejer_monotone", f"{ctx.problem.id} has no zero oracle")
    else:
        z = ctx.problem.zero_oracle(ctx.x0)
        dist = np.linalg.norm(trace.points - z, axis=1)
        push = trace.steps * ctx.errors.norms(K)
        growth = dist[1:] - dist[:-1] - push if K else np.zeros(0)
        worst = float(growth.max()) if K else 0.0
        out.at_most("fejer_monotone", worst, 1e-12 * (1.0 + float(dist[0])))
    return out


@experiment("verify-bounds")
def verify_bounds(ctx: Context) -> Outcome:
    out = Outcome()
    cfg = ctx.config
    trace1 = run_fb(ctx.pair, ctx.schedule, ctx.errors, ctx.x0, cfg.first_length)
    trace2 = run_fb(ctx.pair, ctx.schedule_hat, ctx.errors_hat, ctx.x0_hat, cfg.second_length)
    report = verify_kobayashi(
        ctx.pair, trace1, trace2, ctx.u, problem=ctx.problem.id, seed=cfg.seed, jobs=ctx.jobs
    )
    out.csv(ctx, "bounds.csv", BOUND_COLUMNS, report.rows(ctx.digits))
    worst = report.worst
    out.check(
        "kobayashi",
        worst.slack,
        -cfg.tol * (1.0 + report.scale),
        report.passed(cfg.tol),
        f"at (k={worst.k}, l={worst.l}), lhs={worst.lhs:.6g}, rhs={worst.rhs:.6g}",
    )
    return out


def _log_uniform_step(rng: np.random.Generator, Theta: float) -> float:
    top = Theta if math.isfinite(Theta) else 10.0
    return top * float(10.0 ** rng.uniform(-3.0, 0.0))


@experiment("verify-lemma")
def verify_lemma(ctx: Context) -> Outcome:
    out = Outcome()
    problem, pair = ctx.problem, ctx.pair

    def lemma_block(rng: np.random.Generator, n: int) -> Tuple[float, float]:
        worst = kappa_worst = math.inf
        for _ in range(n):
            lam, mu = _log_uniform_step(rng, pair.Theta), _log_uniform_step(rng, pair.Theta)
            x, y = problem.sample_point(rng), problem.sample_point(rng)
            eps, eta = 0.1 * problem.sample_point(rng), 0.1 * problem.sample_point(rng)
            worst = min(worst, lemma_gap(pair, lam, mu, x, y, eps, eta))
            # relative to ||x||^2 + ||y||^2
            slack = check_kappa_inequality(x, y, pair.kappa)
            kappa_worst = min(kappa_worst, slack / (1.0 + inner(x, x) + inner(y, y)))
        return worst, kappa_worst

    def algebra_block(rng: np.random.Generator, n: int) -> Tuple[float, float, float, float]:
        ident = recur = convex = jensen = 0.0
        for _ in range(n):
            Theta = float(10.0 ** rng.uniform(-1.0, 1.0))
            lam, mu = Theta * float(rng.uniform(1e-3, 1.0)), Theta * float(rng.uniform(1e-3, 1.0))
            ident = max(ident, max(abs(r) for r in abg_identity_residuals(lam, mu, Theta)))
            sk, sl = float(rng.uniform(lam, 20.0)), float(rng.uniform(mu, 20.0))
            tk, tl = lam * lam + float(rng.uniform(0.0, 5.0)), mu * mu + float(rng.uniform(0.0, 5.0))
            recur = max(recur, max(abs(r) for r in c_recurrence_residuals(lam, mu, sk, sl, tk, tl)))
            coeffs = abg(lam, mu, Theta)
            c_kl = c_value(sk, sl, tk, tl)
            c_k_lm1 = c_value(sk, sl - mu, tk, tl - mu * mu)
            c_km1_l = c_value(sk - lam, sl, tk - lam * lam, tl)
            c_km1_lm1 = c_value(sk - lam, sl - mu, tk - lam * lam, tl - mu * mu)
            residual = convex_combination_identity(coeffs, lam, mu, c_kl, c_k_lm1, c_km1_l, c_km1_lm1)
            convex = max(convex, abs(residual) / max(1.0, c_kl * c_kl))
            combo = coeffs.alpha * c_k_lm1 + coeffs.beta * c_km1_l + coeffs.gamma * c_km1_lm1
            jensen = max(jensen, (combo - c_kl) / max(1.0, c_kl))
        return ident, recur, convex, jensen

    trials = ctx.config.trials
    lemma = run_blocks(lemma_block, ctx.config.seed, trials, ctx.jobs, stream=0)
    algebra = run_blocks(algebra_block, ctx.config.seed, 10 * trials, ctx.jobs, stream=1)

    fmt = f".{ctx.digits}g"
    out.csv(
        ctx,
        "lemma.csv",
        ["block", "lemma_gap_min", "kappa_slack_min"],
        [[str(i)] + [format(v, fmt) for v in row] for i, row in enumerate(lemma)],
    )
    out.csv(
        ctx,
        "algebra.csv",
        ["block", "abg_residual", "c_recurrence_residual", "convex_residual", "jensen_excess"],
        [[str(i)] + [format(v, fmt) for v in row] for i, row in enumerate(algebra)],
    )
    out.at_least("lemma_gap", min(r[0] for r in lemma), -1e-10)
    out.at_least("kappa_inequality", min(r[1] for r in lemma), -1e-12)
    out.at_most("abg_identities", max(r[0] for r in algebra), 1e-12)
    out.at_most("c_recurrences", max(r[1] for r in algebra), 1e-12)
    out.at_most("convex_combination", max(r[2] for r in algebra), 1e-12)
    out.at_most("jensen_step", max(r[3] for r in algebra), 1e-12)
    return out


@experiment("flow-convergence")
def flow_convergence(ctx: Context) -> Outcome:
    out = Outcome()
    cfg, pair, problem = ctx.config, ctx.pair, ctx.problem
    x0, S = ctx.x0, cfg.horizon
    mn, _ = min_norm(pair, x0)
    ms = [m for m in cfg.m_values if S / m <= pair.Theta * (1.0 + settings.step_rtol)]
    if len(ms) < len(cfg.m_values):
        out.notes.append(f"m values below {math.ceil(S / pair.Theta)} skipped (step S/m above Theta)")
    if not ms:
        raise ConfigError(f"no admissible m in {cfg.m_values} for S={S}, Theta={pair.Theta}")

    values = {m: exp_formula(pair, x0, S, m) for m in ms}
    exact = problem.exact_flow(x0, S) if problem.exact_flow is not None else None
    errors = {m: distance(values[m], exact) if exact is not None else math.nan for m in ms}

    grid_t = np.linspace(0.0, S, 100)
    gaps = {}
    for m in ms:
        gaps[m] = max(
            distance(exp_formula(pair, x0, float(t), m), pc_interpolant(pair, x0, S, m, float(t)))
            for t in grid_t
        )

    fmt = f".{ctx.digits}g"
    rows = [
        [
            str(m),
            format_vector(values[m], ctx.digits),
            format(errors[m], fmt),
            format(cauchy_bound(mn, S, S, m), fmt),
            format(gaps[m], fmt),
            format(um_vm_gap_bound(mn, S, m), fmt),
        ]
        for m in ms
    ]
    out.csv(ctx, "flow_convergence.csv", ["m", "u_m", "error", "cauchy_bound", "um_vm_gap", "um_vm_bound"], rows)

    roundoff = 1e-12 * (1.0 + mn * S)
    if exact is None:
        out.skipped("cauchy_bound", f"{problem.id} has no closed-form flow")
        out.skipped("error_decreasing", f"{problem.id} has no closed-form flow")
    else:
        excess = max(errors[m] - cauchy_bound(mn, S, S, m) for m in ms)
        out.at_most("cauchy_bound", excess, roundoff)
        rises = [errors[b] - errors[a] for a, b in zip(ms, ms[1:])]
        out.at_most("error_decreasing", max(rises, default=0.0), roundoff)

    two_grid = max(
        (
            distance(values[m], values[n]) - mn * S * math.sqrt(1.0 / m + 1.0 / n)
            for m, n in zip(ms, ms[1:])
        ),
        default=0.0,
    )
    out.at_most("two_grid", two_grid, roundoff)
    out.at_most("um_vm_gap", max(gaps[m] - um_vm_gap_bound(mn, S, m) for m in ms), roundoff)

    trace = run_fb(pair, ctx.schedule, ErrorSequence.none(pair.dim), x0, cfg.k)
    horizon = float(trace.sigma[-1])
    if horizon <= 0.0:
        out.skipped("hybrid_bound", "empty forward-backward run")
        return out
    grid = build_trajectory(pair, x0, horizon, cfg.grid_points, cfg.flow_tol, problem.exact_flow)

    def hybrid_block(rng: np.random.Generator, n: int) -> float:
        worst = -math.inf
        for _ in range(n):
            k = int(rng.integers(0, cfg.k + 1))
            j = int(rng.integers(0, grid.times.shape[0]))
            lhs = distance(trace.x(k), grid.points[j])
            rhs = hybrid_bound(x0, x0, mn, mn, float(trace.sigma[k]), float(trace.tau[k]), float(grid.times[j]))
            worst = max(worst, lhs - rhs - grid.certified_error)
        return worst

    hybrid = max(run_blocks(hybrid_block, cfg.seed, cfg.trials, ctx.jobs, stream=2))
    out.at_most("hybrid_bound", hybrid, roundoff, f"certified grid error {grid.certified_error:.3e}")
    return out


@experiment("benilan")
def benilan(ctx: Context) -> Outcome:
    out = Outcome()
    cfg, pair, problem = ctx.config, ctx.pair, ctx.problem
    grid = build_trajectory(pair, ctx.x0, cfg.horizon, cfg.grid_points, cfg.flow_tol, problem.exact_flow)
    mn, _ = min_norm(pair, ctx.x0)
    profile = minnorm_profile(pair, grid)
    out.csv(ctx, "trajectory.csv", GRID_COLUMNS, grid.rows(profile, ctx.digits))

    n = grid.times.shape[0]

    def tuple_block(rng: np.random.Generator, count: int) -> List[Tuple[float, float, float, float]]:
        rows = []
        for _ in range(count):
            x = problem.sample_domain(rng)
            v = pair.A.nearest_selection(x, problem.sample_point(rng))
            y = v + pair.B(x)
            i, j = sorted(int(idx) for idx in rng.integers(0, n, 2))
            s, t = float(grid.times[i]), float(grid.times[j])
            rows.append((s, t, benilan_defect(pair, grid, x, y, s, t), benilan_budget(grid, x, y, s, t)))
        return rows

    tuples = [row for block in run_blocks(tuple_block, cfg.seed, cfg.trials, ctx.jobs, stream=3) for row in block]
    fmt = f".{ctx.digits}g"
    out.csv(
        ctx,
        "benilan.csv",
        ["s", "t", "defect", "budget"],
        [[format(v, fmt) for v in row] for row in tuples],
    )
    out.at_most("benilan_defect", max(d - b for _, _, d, b in tuples), 0.0)

    lip = lipschitz_defect(grid, mn)
    out.at_most("lipschitz", lip, 2.0 * grid.certified_error + 1e-12 * (1.0 + mn * cfg.horizon))

    slack = profile_slack(pair, grid, profile)
    if math.isinf(slack):
        out.skipped(
            "minnorm_profile",
            f"{problem.id}: selection of A is not Lipschitz, approximate grid (error {grid.certified_error:.3e})",
        )
    else:
        out.at_most("minnorm_profile", profile_violation(profile), slack)
    return out


@experiment("almost-orbit")
def almost_orbit(ctx: Context) -> Outcome:
    out = Outcome()
    cfg, problem = ctx.config, ctx.problem
    h_grid = geometric_h_grid(cfg.h_delta, cfg.h_max)
    reports = [
        almost_orbit_sweep(problem, ctx.schedule, ctx.x0, cfg.t_values, h_grid, direction, jobs=ctx.jobs)
        for direction in DIRECTIONS
    ]
    out.csv(ctx, "almost_orbit.csv", ALMOST_ORBIT_COLUMNS, [row for r in reports for row in r.csv_rows(ctx.digits)])
    for report in reports:
        worst = report.worst_margin
        out.check(
            f"almost_orbit_{report.direction}",
            worst,
            -cfg.tol,
            not report.violations(cfg.tol),
            f"{len(report.rows)} t values",
        )
    bounds = [r.bound for r in sorted(reports[0].rows, key=lambda r: r.t)]
    rises = [b2 - b1 for b1, b2 in zip(bounds, bounds[1:])]
    out.check("bound_decreasing", max(rises, default=-math.inf), 0.0, reports[0].bound_decreasing)

    U_T = ScheduleProduct(ctx.pair, ctx.schedule)
    axioms = check_evolution_axioms(
        U_T, problem.sample_domain, min(cfg.trials, 10), make_rng(cfg.seed, 4), horizon=max(cfg.t_values)
    )
    out.at_most(
        "schedule_product_axioms",
        max(axioms.identity, axioms.cocycle, axioms.nonexpansive),
        1e-12,
        f"identity={axioms.identity:.3e} cocycle={axioms.cocycle:.3e} nonexpansive={axioms.nonexpansive:.3e}",
    )
    return out


@experiment("equivalence")
def equivalence(ctx: Context) -> Outcome:
    out = Outcome()
    cfg = ctx.config
    x0_set = [as_vector(x) for x in cfg.x0_set] if cfg.x0_set else [ctx.x0]
    errors = None if ctx.errors.is_zero else ctx.errors
    report = equivalence_experiment(ctx.problem, ctx.schedule, x0_set, cfg.t_max, cfg.k_max, cfg.flow_tol, errors)
    out.csv(ctx, "equivalence.csv", EQUIVALENCE_COLUMNS, report.csv_rows(ctx.digits))
    out.at_most("limits_near_zero", report.worst_zero_distance, cfg.limit_tol)
    out.at_most("limits_agree", report.worst_gap, cfg.limit_tol)
    if errors is None:
        out.skipped("perturbation_shift", "no error sequence configured")
    else:
        out.at_most("perturbation_shift", report.worst_shift, cfg.limit_tol)
    out.notes.append(report.note)
    if report.partial:
        out.partial = True
        out.notes.append("flow limit computed with a capped step budget")
    return out


def run(config: ExperimentConfig, out_dir: str | Path | None = None, jobs: int | None = None) -> RunSummary:
    started = time.perf_counter()
    ctx = prepare(config, out_dir, jobs)
    logger.info(f"{config.experiment}: problem={ctx.problem.id} seed={config.seed} out={ctx.out_dir}")
    handler = HANDLERS[config.experiment]
    try:
        outcome = handler(ctx)
    except FBFlowError:
        logger.exception(f"{config.experiment} aborted")
        raise
    summary = RunSummary(
        experiment=config.experiment,
        problem=ctx.problem.id,
        seed=config.seed,
        criteria=outcome.criteria,
        wall_time=time.perf_counter() - started,
        artifacts=outcome.artifacts,
        partial=outcome.partial,
        notes=outcome.notes,
    )
    write_summary(ctx.out_dir / "summary.json", summary)
    for c in summary.criteria:
        level = logging.INFO if c.passed else logging.WARNING
        logger.log(level, f"criterion {c.name}: {c.status} (worst {c.worst:.6g})")
    return summary
