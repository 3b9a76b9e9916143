import math

import numpy as np
import pytest

from fbflow.app.errors import BudgetExceeded, InvalidInput, MembershipError, StepRangeError
from fbflow.app.flow import (
    FlowQuery,
    TrajectoryGrid,
    approximate_flow,
    benilan_budget,
    benilan_defect,
    build_trajectory,
    cauchy_bound,
    exp_formula,
    hybrid_bound,
    lipschitz_defect,
    min_admissible_m,
    minnorm_profile,
    pc_interpolant,
    profile_slack,
    profile_violation,
    reference_flow,
    required_m,
    um_vm_gap_bound,
)
from fbflow.app.operators import min_norm
from fbflow.app.splitting import ErrorSequence, StepSchedule, run_fb
from fbflow.app.vectorspace import as_vector
from fbflow.config import settings


def test_exp_formula_linear1d_closed_form(linear1d):
    for m in [1, 4, 64]:
        value = exp_formula(linear1d.pair, as_vector([1.0]), 1.0, m)
        h = 1.0 / m
        assert value[0] == pytest.approx(((1 - h) / (1 + h)) ** m, rel=1e-13)


def test_exp_formula_step_check_reports_required_m(linear1d):
    with pytest.raises(StepRangeError) as info:
        exp_formula(linear1d.pair, as_vector([1.0]), 3.0, 2)
    assert info.value.required_m == 3
    assert min_admissible_m(3.0, 1.0) == 3
    assert min_admissible_m(3.0, math.inf) == 1


def test_exp_formula_converges_to_the_flow_within_the_estimate(catalog):
    for problem in catalog:
        if problem.exact_flow is None:
            continue
        x0 = problem.default_x0
        mn, _ = min_norm(problem.pair, x0)
        exact = problem.exact_flow(x0, 1.0)
        errors = []
        for m in [4, 16, 64, 256]:
            err = float(np.linalg.norm(exp_formula(problem.pair, x0, 1.0, m) - exact))
            assert err <= cauchy_bound(mn, 1.0, 1.0, m) + 1e-12
            errors.append(err)
        assert errors == sorted(errors, reverse=True)


def test_skew2d_flow_matches_matrix_exponential(skew2d):
    from scipy.linalg import expm

    generator = -(skew2d.pair.A.matrix + 0.5 * np.eye(2))
    x0 = as_vector([1.0, 0.0])
    for t in [0.3, 1.0, 2.5]:
        assert skew2d.exact_flow(x0, t) == pytest.approx(expm(t * generator) @ x0, abs=1e-12)


def test_skew2d_rotation_direction():
    from fbflow.app.problems import make_skew2d

    # A = [[0, -omega], [omega, 0]] and u' = -Au: for omega > 0 the flow turns counterclockwise
    problem = make_skew2d(omega=1.0, gamma=0.0)
    assert problem.exact_flow(as_vector([1.0, 0.0]), math.pi / 2) == pytest.approx([0.0, 1.0], abs=1e-15)


def test_two_grid_consistency(lasso1d):
    x0 = as_vector([2.0])
    mn, _ = min_norm(lasso1d.pair, x0)
    for m, n in [(4, 8), (16, 64), (100, 300)]:
        gap = float(np.linalg.norm(exp_formula(lasso1d.pair, x0, 1.0, m) - exp_formula(lasso1d.pair, x0, 1.0, n)))
        assert gap <= mn * math.sqrt(1.0 / m + 1.0 / n) + 1e-12


def test_cauchy_bound_values():
    assert cauchy_bound(2.0, 1.0, 1.0, 4) == pytest.approx(1.0)
    assert cauchy_bound(1.0, 2.0, 1.0, 4, 4) == pytest.approx(math.sqrt(1 + 1 + 0.25))
    with pytest.raises(InvalidInput):
        cauchy_bound(1.0, 1.0, 1.0, 0)


def test_pc_interpolant(linear1d):
    x0 = as_vector([1.0])
    assert pc_interpolant(linear1d.pair, x0, 1.0, 4, 0.0).tolist() == [1.0]
    assert np.array_equal(pc_interpolant(linear1d.pair, x0, 1.0, 4, 1.0), exp_formula(linear1d.pair, x0, 1.0, 4))
    assert np.array_equal(pc_interpolant(linear1d.pair, x0, 1.0, 4, 0.6), exp_formula(linear1d.pair, x0, 0.5, 2))
    with pytest.raises(InvalidInput):
        pc_interpolant(linear1d.pair, x0, 1.0, 4, 1.5)


def test_pc_interpolant_stays_close_to_the_exponential_formula(box):
    x0 = box.default_x0
    mn, _ = min_norm(box.pair, x0)
    S, m = 1.0, 64
    worst = max(
        float(np.linalg.norm(exp_formula(box.pair, x0, t, m) - pc_interpolant(box.pair, x0, S, m, t)))
        for t in np.linspace(0.0, S, 50)
    )
    assert worst <= um_vm_gap_bound(mn, S, m)


def test_hybrid_bound_linear1d(linear1d):
    pair, x0 = linear1d.pair, as_vector([1.0])
    mn, _ = min_norm(pair, x0)
    trace = run_fb(pair, StepSchedule.constant(0.5), ErrorSequence.none(1), x0, 20)
    for k in range(0, 21, 5):
        for t in [0.0, 1.0, 3.0, 10.0]:
            lhs = float(np.linalg.norm(trace.x(k) - linear1d.exact_flow(x0, t)))
            assert lhs <= hybrid_bound(x0, x0, mn, mn, trace.sigma[k], trace.tau[k], t) + 1e-12


def test_required_m_and_budget(linear1d, monkeypatch):
    assert required_m(2.0, 1.0, 0.1, 1.0) == 400
    assert required_m(0.0, 5.0, 1e-9, 1.0) == 5
    monkeypatch.setattr(settings, "max_flow_steps", 100)
    with pytest.raises(BudgetExceeded) as info:
        approximate_flow(linear1d.pair, FlowQuery(as_vector([1.0]), 1.0, 1e-3))
    assert info.value.required == 4_000_000


def test_approximate_flow_meets_tolerance(skew2d):
    x0 = as_vector([1.0, 1.0])
    value, m = approximate_flow(skew2d.pair, FlowQuery(x0, 1.0, 1e-2))
    assert np.linalg.norm(value - skew2d.exact_flow(x0, 1.0)) <= 1e-2
    assert m >= 1


def test_approximate_flow_at_a_zero_is_constant(lasso1d):
    value, m = approximate_flow(lasso1d.pair, FlowQuery(as_vector([0.0]), 5.0, 1e-6))
    assert value.tolist() == [0.0]
    assert m == 1


def test_flow_query_validation():
    with pytest.raises(InvalidInput):
        FlowQuery(as_vector([1.0]), -1.0, 0.1)
    with pytest.raises(InvalidInput):
        FlowQuery(as_vector([1.0]), 1.0, 0.0)


def test_reference_flow_certificate(lasso1d):
    x0 = as_vector([2.0])
    value, cert = reference_flow(lasso1d.pair, x0, 1.5, 0.1)
    assert cert <= 0.025 + 1e-15
    assert np.linalg.norm(value - lasso1d.exact_flow(x0, 1.5)) <= cert


def test_lasso_closed_form_flow(lasso1d):
    flow = lasso1d.exact_flow
    # positive side: u' = -u
    assert flow(as_vector([2.0]), 0.5)[0] == pytest.approx(2.0 * math.exp(-0.5), rel=1e-14)
    # negative side: u' = 2 - u until u hits 0 at t = log(3/2), then u = 0 is stationary
    assert flow(as_vector([-1.0]), 0.25)[0] == pytest.approx(2.0 - 3.0 * math.exp(-0.25), rel=1e-14)
    assert flow(as_vector([-1.0]), 1.0)[0] == 0.0
    assert flow(as_vector([-1.0]), 50.0)[0] == 0.0
    assert flow(as_vector([0.0]), 3.0)[0] == 0.0


def test_lasso_closed_form_flow_against_fine_exponential_formula(lasso1d):
    x0 = as_vector([-1.0])
    value = exp_formula(lasso1d.pair, x0, 1.0, 4000)
    assert abs(value[0] - lasso1d.exact_flow(x0, 1.0)[0]) <= 1.0 / math.sqrt(4000)


def test_trajectory_grid_without_closed_form(box):
    grid = build_trajectory(box.pair, box.default_x0, 1.0, 11, 0.05)
    assert grid.times.shape == (11,)
    assert grid.points.shape == (11, 2)
    assert grid.certified_error <= 0.05
    assert np.array_equal(grid.points[0], box.default_x0)
    assert all(box.pair.A.in_domain(p) for p in grid.points)
    reference, cert = reference_flow(box.pair, box.default_x0, 1.0, 0.05)
    assert np.linalg.norm(grid.points[-1] - reference) <= grid.certified_error + cert


def test_trajectory_grid_validation():
    with pytest.raises(InvalidInput):
        TrajectoryGrid(times=np.array([0.0, 0.0]), points=np.zeros((2, 1)), certified_error=0.0)
    grid = TrajectoryGrid(times=np.array([0.0, 0.5, 1.0]), points=np.zeros((3, 1)), certified_error=0.0)
    assert grid.index_of(0.5) == 1
    with pytest.raises(InvalidInput):
        grid.index_of(0.25)


def test_benilan_inequality_linear1d(linear1d, rng):
    pair = linear1d.pair
    grid = build_trajectory(pair, as_vector([1.0]), 2.0, 201, 1e-3, linear1d.exact_flow)
    for _ in range(200):
        x = linear1d.sample_point(rng)
        y = 2.0 * x
        i, j = sorted(rng.integers(0, 201, 2))
        s, t = float(grid.times[i]), float(grid.times[j])
        assert benilan_defect(pair, grid, x, y, s, t) <= benilan_budget(grid, x, y, s, t)


def test_benilan_inequality_box_with_approximate_grid(box, rng):
    pair = box.pair
    grid = build_trajectory(pair, box.default_x0, 1.0, 101, 0.02)
    for _ in range(100):
        x = box.sample_domain(rng)
        y = pair.A.nearest_selection(x, box.sample_point(rng)) + pair.B(x)
        i, j = sorted(rng.integers(0, 101, 2))
        s, t = float(grid.times[i]), float(grid.times[j])
        assert benilan_defect(pair, grid, x, y, s, t) <= benilan_budget(grid, x, y, s, t)


def test_benilan_rejects_non_members(linear1d):
    grid = build_trajectory(linear1d.pair, as_vector([1.0]), 1.0, 11, 1e-3, linear1d.exact_flow)
    with pytest.raises(MembershipError):
        benilan_defect(linear1d.pair, grid, as_vector([1.0]), as_vector([5.0]), 0.0, 1.0)


def test_lipschitz_and_profile(skew2d):
    pair = skew2d.pair
    x0 = skew2d.default_x0
    grid = build_trajectory(pair, x0, 3.0, 61, 1e-3, skew2d.exact_flow)
    mn, _ = min_norm(pair, x0)
    assert lipschitz_defect(grid, mn) <= 1e-12
    profile = minnorm_profile(pair, grid)
    assert profile_violation(profile) <= profile_slack(pair, grid, profile)
    assert profile[-1] < profile[0]


def test_profile_violation():
    assert profile_violation([3.0, 2.0, 2.0, 1.0]) == 0.0
    assert profile_violation([3.0, 1.0, 1.5]) == pytest.approx(0.5)
    assert profile_violation([1.0]) == 0.0


def test_exponential_formula_rate_linear1d(linear1d):
    target = math.exp(-2.0)
    for m in [4, 16, 64, 256, 1024]:
        assert abs(exp_formula(linear1d.pair, as_vector([1.0]), 1.0, m)[0] - target) <= 2.0 / math.sqrt(m)
    assert abs(exp_formula(linear1d.pair, as_vector([1.0]), 1.0, 100)[0] - target) <= 0.2


@pytest.mark.parametrize("m", [16, 256])
def test_interpolant_gap_over_the_catalog(catalog, m):
    S = 1.0
    for problem in catalog:
        pair, x0 = problem.pair, problem.default_x0
        if S / m > pair.Theta:
            continue
        mn, _ = min_norm(pair, x0)
        worst = max(
            float(np.linalg.norm(exp_formula(pair, x0, float(t), m) - pc_interpolant(pair, x0, S, m, float(t))))
            for t in np.linspace(0.0, S, 100)
        )
        assert worst <= um_vm_gap_bound(mn, S, m) + 1e-12, problem.id


@pytest.mark.parametrize("problem_id", ["skew2d", "l1_quadratic"])
def test_benilan_inequality_with_closed_form(problem_id, rng):
    from fbflow.app.dependencies import get_problem

    problem = get_problem(problem_id)
    pair = problem.pair
    grid = build_trajectory(pair, problem.default_x0, 2.0, 201, 1e-3, problem.exact_flow)
    assert grid.certified_error == 0.0
    for _ in range(200):
        x = problem.sample_domain(rng)
        y = pair.A.nearest_selection(x, problem.sample_point(rng)) + pair.B(x)
        i, j = sorted(rng.integers(0, 201, 2))
        s, t = float(grid.times[i]), float(grid.times[j])
        assert benilan_defect(pair, grid, x, y, s, t) <= benilan_budget(grid, x, y, s, t)


@pytest.mark.parametrize("problem_id", ["skew2d", "l1_quadratic", "box_projected"])
def test_hybrid_bound_over_the_catalog(problem_id):
    from fbflow.app.dependencies import get_problem

    problem = get_problem(problem_id)
    pair, x0 = problem.pair, problem.default_x0
    mn, _ = min_norm(pair, x0)
    trace = run_fb(pair, StepSchedule.constant(0.5 * pair.Theta), ErrorSequence.none(problem.dim), x0, 30)
    for t in [0.5, 1.0, 2.0]:
        flow, cert = reference_flow(pair, x0, t, 0.05, problem.exact_flow)
        for k in range(0, 31, 5):
            lhs = float(np.linalg.norm(trace.x(k) - flow))
            assert lhs <= hybrid_bound(x0, x0, mn, mn, trace.sigma[k], trace.tau[k], t) + cert + 1e-12, (k, t)


def test_approximate_flow_on_random_queries(catalog, rng):
    for problem in catalog:
        if problem.exact_flow is None:
            continue
        for _ in range(12):
            x0 = problem.sample_point(rng)
            scale = float(np.linalg.norm(x0))
            if scale > 1.5:
                x0 = x0 * (1.5 / scale)
            t = float(rng.uniform(0.1, 1.5))
            tol = float(rng.choice([0.05, 0.1]))
            value, m = approximate_flow(problem.pair, FlowQuery(x0, t, tol))
            mn, _ = min_norm(problem.pair, x0)
            assert mn * t / math.sqrt(m) <= tol
            assert np.linalg.norm(value - problem.exact_flow(x0, t)) <= tol, (problem.id, x0, t, tol)


def test_profile_with_a_rise_is_rejected(lasso1d):
    pair = lasso1d.pair
    grid = build_trajectory(pair, as_vector([2.0]), 2.0, 41, 1e-3, lasso1d.exact_flow)
    profile = minnorm_profile(pair, grid)
    assert profile_violation(profile) <= profile_slack(pair, grid, profile)

    bumped = list(profile)
    bumped[20] = profile[10]
    assert profile_violation(bumped) > profile_slack(pair, grid, bumped)


def test_profile_slack_is_unbounded_on_an_approximate_box_grid(box):
    grid = build_trajectory(box.pair, box.default_x0, 1.0, 11, 0.05)
    assert grid.certified_error > 0.0
    assert math.isinf(profile_slack(box.pair, grid, minnorm_profile(box.pair, grid)))
