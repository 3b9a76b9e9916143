import math

import numpy as np
import pytest

from fbflow.app.errors import DomainError, InvalidInput, StepRangeError
from fbflow.app.operators import (
    BoxNormalCone,
    L1Subdifferential,
    LinearOp,
    OperatorPair,
    affine_map,
    check_step,
    fb_map,
    fb_residual,
    forward,
    max_expansion,
    min_norm,
    soft_threshold,
    verify_cocoercive,
    verify_monotone,
)
from fbflow.app.vectorspace import as_vector


def test_fb_map_linear1d_example(linear1d):
    # A = I, B = I, lam = 1/2: J(1 - 1/2) = 0.5 / 1.5
    x1 = fb_map(linear1d.pair, 0.5, as_vector([1.0]))
    assert x1[0] == pytest.approx(1.0 / 3.0, abs=1e-15)


def test_fb_map_rejects_step_above_theta(linear1d):
    with pytest.raises(StepRangeError):
        fb_map(linear1d.pair, 1.5, as_vector([1.0]))
    with pytest.raises(StepRangeError):
        fb_map(linear1d.pair, 0.0, as_vector([1.0]))


def test_fb_map_with_error_term(linear1d):
    x1 = fb_map(linear1d.pair, 0.5, as_vector([1.0]), as_vector([0.2]))
    assert x1[0] == pytest.approx((0.5 + 0.1) / 1.5, abs=1e-15)


def test_soft_threshold():
    z = as_vector([3.0, -0.5, -2.0, 0.0])
    assert soft_threshold(z, 1.0).tolist() == [2.0, 0.0, -1.0, 0.0]


def test_l1_selection_and_gap():
    A = L1Subdifferential(2, 1.0)
    x = as_vector([0.0, 2.0])
    assert A.nearest_selection(x, as_vector([3.0, 0.0])).tolist() == [1.0, 1.0]
    assert A.member_gap(x, as_vector([0.5, 1.0])) == 0.0
    assert A.member_gap(x, as_vector([0.5, -1.0])) == pytest.approx(2.0)


def test_box_domain_and_normal_cone():
    A = BoxNormalCone(as_vector([0.0, 0.0]), as_vector([1.0, 1.0]))
    assert A.in_domain(as_vector([1.0, 0.5]))
    with pytest.raises(DomainError):
        A.require_domain(as_vector([1.5, 0.5]))
    # at the upper face only nonnegative first components are normals
    x = as_vector([1.0, 0.5])
    assert A.member_gap(x, as_vector([2.0, 0.0])) == 0.0
    assert A.member_gap(x, as_vector([-1.0, 0.0])) == pytest.approx(1.0)
    assert A.resolvent(3.0, as_vector([2.0, -1.0])).tolist() == [1.0, 0.0]


def test_linear_op_rejects_non_monotone_matrix():
    with pytest.raises(InvalidInput):
        LinearOp([[-1.0, 0.0], [0.0, 1.0]])


def test_resolvent_graph_residual_vanishes(catalog, rng):
    for problem in catalog:
        pair = problem.pair
        lam = 0.5 * min(pair.Theta, 1.0)
        for _ in range(20):
            x = problem.sample_point(rng)
            x_next = fb_map(pair, lam, x)
            assert fb_residual(pair, lam, x, None, x_next) <= 1e-9 * (1.0 + np.linalg.norm(x))


def test_monotone_and_cocoercive_checks(catalog, rng):
    for problem in catalog:
        assert verify_monotone(problem.pair.A, problem.sample_point, 200, rng) >= -1e-9
        assert verify_cocoercive(problem.pair.B, problem.sample_point, 200, rng) >= -1e-9


def test_cocoercive_check_detects_wrong_theta(rng):
    B = affine_map([[2.0]], [0.0], theta=1.0)
    sampler = lambda g: g.standard_normal(1)
    assert verify_cocoercive(B, sampler, 50, rng) < 0.0


def test_fb_map_is_nonexpansive(catalog, rng):
    for problem in catalog:
        pair = problem.pair
        lam = min(pair.Theta, 2.0)
        worst = max_expansion(lambda z: fb_map(pair, lam, z), problem.sample_point, 200, rng)
        assert worst <= 1e-12


def test_forward_step_range():
    B = affine_map([[1.0]], [0.0], theta=1.0)
    assert forward(B, 0.0, as_vector([2.0]))[0] == 2.0
    assert forward(B, 2.0, as_vector([2.0]))[0] == pytest.approx(-2.0)
    with pytest.raises(StepRangeError):
        forward(B, 2.5, as_vector([2.0]))


def test_check_step_tolerates_rounding():
    check_step(1.0 + 1e-14, 1.0)
    with pytest.raises(StepRangeError):
        check_step(1.0 + 1e-9, 1.0)
    with pytest.raises(StepRangeError):
        check_step(math.nan, 1.0)


def test_min_norm(linear1d, lasso1d, box):
    mn, sel = min_norm(linear1d.pair, as_vector([2.0]))
    assert mn == pytest.approx(4.0)
    assert sel.tolist() == pytest.approx([4.0])
    # at the lasso zero the minimal selection vanishes
    mn, _ = min_norm(lasso1d.pair, as_vector([0.0]))
    assert mn == 0.0
    mn, _ = min_norm(box.pair, box.zero_oracle(box.default_x0))
    assert mn <= 1e-10


def test_pair_theta_is_theta_over_kappa(skew2d):
    assert skew2d.pair.kappa == 1.0
    assert skew2d.Theta == pytest.approx(2.0)
    pair = OperatorPair(A=LinearOp([[1.0]]), B=affine_map([[0.0]], [0.0], theta=math.inf))
    assert math.isinf(pair.Theta)
