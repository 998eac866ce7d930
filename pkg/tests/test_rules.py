import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibra.core import LossFunction, Predictor, RandomStream, ValidationError
from calibra.fixtures import pop4
from calibra.rules import (
    CoordinateThresholdRule,
    CustomRule,
    ITARule,
    TableRule,
    ThresholdRule,
    affine_projection,
    affineness_distance,
    compose,
    hard_threshold_rule,
    ita_rule,
    lipschitz_estimate,
    loss_min_rule,
    mac_rule,
    random_instantiation,
    rule_from_dict,
    simplex_lattice,
    table_rule,
    violation,
)

P = pop4()
N0, HALF, L01 = P.nature, P.predictor, P.loss

unit_prob = st.floats(min_value=0, max_value=1, allow_nan=False)


def test_ita_example():
    assert ita_rule([0.2, 0.8])([0.25, 0.75]) == pytest.approx(0.65, abs=1e-15)


def test_ita_rejects_bad_probabilities():
    with pytest.raises(ValidationError):
        ITARule([0.2, 1.2])
    with pytest.raises(ValidationError):
        ITARule([0.5])


def test_accept_checks_dimension():
    with pytest.raises(ValidationError):
        ita_rule([0.1, 0.2])([0.3, 0.3, 0.4])


@pytest.mark.parametrize(
    "rule,expected",
    [
        (ThresholdRule(1, 2), (1.0, 0.0)),
        (loss_min_rule(L01), (0.0, 1.0)),
        (hard_threshold_rule(0, 0.95, 2), (1.0, 0.0)),
    ],
)
def test_affine_projection(rule, expected):
    np.testing.assert_array_equal(affine_projection(rule).g, expected)


def test_mac_rule_on_zero_one_loss():
    rule = mac_rule(L01)
    np.testing.assert_array_equal(rule.g, [0.0, 1.0])
    assert rule([0.5, 0.5]) == 0.5


@pytest.mark.parametrize("cutoff,k,g", [(0, 3, (0, 0, 0)), (2, 3, (1, 1, 0)), (3, 3, (1, 1, 1))])
def test_threshold_rule_accepts_best_ranks(cutoff, k, g):
    np.testing.assert_array_equal(ThresholdRule(cutoff, k).g, g)


def test_threshold_rule_validation():
    with pytest.raises(ValidationError):
        ThresholdRule(4, 3)
    with pytest.raises(ValidationError):
        CoordinateThresholdRule(2, 0.5, 2)


# loss-minimizing rule


@pytest.mark.parametrize("y,expected", [((0.5, 0.5), 0.0), ((0.4, 0.6), 1.0), ((0.6, 0.4), 0.0), ((0, 1), 1.0)])
def test_loss_min_ties_reject(y, expected):
    assert loss_min_rule(L01)(y) == expected


def test_loss_min_with_all_ties_never_accepts():
    flat = LossFunction(np.array([[0.3, 0.3], [0.6, 0.6], [0.1, 0.1]]))
    pts = simplex_lattice(3, 6)
    assert np.all(loss_min_rule(flat).accept(pts) == 0.0)


def test_compose_on_nature():
    h = compose(loss_min_rule(L01), N0.as_predictor())
    assert np.flatnonzero(h.acceptance).tolist() == [2, 3]
    assert compose(ita_rule([0.0, 1.0]), HALF).acceptance.tolist() == [0.5] * 4


# affineness


def test_squared_rule_violation():
    sq = CustomRule(lambda y: y[..., 0] ** 2, 2, "square")
    cert = affineness_distance(sq, m=4)
    assert cert.epsilon == pytest.approx(0.25, abs=1e-12)
    assert cert.replay(sq) == pytest.approx(cert.epsilon, abs=1e-15)
    assert violation(sq, (1, 0), (0, 1), 0.5) == pytest.approx(0.25)


def test_hard_threshold_is_far_from_affine():
    rule = hard_threshold_rule()
    cert = affineness_distance(rule, m=20)
    assert cert.epsilon >= 0.5
    assert cert.replay(rule) == pytest.approx(cert.epsilon, abs=1e-15)


def test_affineness_resolution_validation():
    with pytest.raises(ValidationError):
        affineness_distance(ita_rule([0, 1]), m=1)


@given(st.lists(unit_prob, min_size=2, max_size=4))
@settings(max_examples=30, deadline=None)
def test_ita_rules_have_no_violation(g):
    rule = ITARule(g)
    cert = affineness_distance(rule, m=4)
    assert cert.epsilon <= 1e-12
    # Zero distance means the rule is its own projection.
    proj = affine_projection(rule)
    pts = simplex_lattice(rule.k, 4)
    np.testing.assert_allclose(proj.accept(pts), rule.accept(pts), atol=1e-12)


@given(st.lists(unit_prob, min_size=2, max_size=3))
@settings(max_examples=25, deadline=None)
def test_witness_separation_matches_lipschitz_bound(c):
    c = np.array(c)
    rule = CustomRule(lambda y: (y**2) @ c, len(c), "quadratic")
    cert = affineness_distance(rule, m=6)
    lip = lipschitz_estimate(rule, m=6)
    assert math.isfinite(lip)
    if cert.epsilon > 1e-9:
        sep = np.max(np.abs(np.array(cert.y) - np.array(cert.y2)))
        assert sep >= cert.epsilon / lip - 1e-9


@given(st.lists(unit_prob, min_size=2, max_size=3), st.floats(min_value=0, max_value=1), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_ita_commutes_with_mixtures(g, gamma, seed):
    rule = ITARule(g)
    gen = RandomStream(seed, "mix").generator
    a = Predictor(gen.dirichlet(np.ones(rule.k), size=5))
    b = Predictor(gen.dirichlet(np.ones(rule.k), size=5))
    mix = Predictor(gamma * a.probs + (1 - gamma) * b.probs)
    lhs = compose(rule, mix).acceptance
    rhs = gamma * compose(rule, a).acceptance + (1 - gamma) * compose(rule, b).acceptance
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# Lipschitz


@pytest.mark.parametrize(
    "rule,expected",
    [(ita_rule([1.0, 0.0]), 1.0), (ita_rule([0.3, 0.3]), 0.0), (ita_rule([0.0, 0.5, 1.0]), 1.0)],
)
def test_lipschitz_of_affine_rules(rule, expected):
    assert lipschitz_estimate(rule) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("rule", [loss_min_rule(L01), hard_threshold_rule()])
def test_jump_rules_have_no_finite_lipschitz(rule):
    assert lipschitz_estimate(rule) == math.inf


def test_lipschitz_large_k_uses_random_pairs():
    rule = ita_rule([1.0, 0.0, 0.0, 0.0, 0.5])
    est = lipschitz_estimate(rule, m=4, seed=3)
    assert 0 < est <= 1.0 + 1e-9
    assert est == lipschitz_estimate(rule, m=4, seed=3)


# random instantiation


def test_random_instantiation_fixes_deterministic_predictors():
    pred = N0.as_predictor()
    out = random_instantiation(pred, RandomStream(11))
    np.testing.assert_array_equal(out.probs, pred.probs)


def test_random_instantiation_frequency():
    out = random_instantiation(Predictor.uniform(100_000, 2), RandomStream(5))
    assert out.is_deterministic
    # 4 sigma of a fair Bernoulli mean at 1e5 draws is about 0.0063.
    assert abs(out.probs[:, 0].mean() - 0.5) <= 0.01


def test_random_instantiation_is_seeded():
    gen = RandomStream(2, "p").generator
    pred = Predictor(gen.dirichlet(np.ones(3), size=200))
    a = random_instantiation(pred, RandomStream(9))
    b = random_instantiation(pred, RandomStream(9))
    c = random_instantiation(pred, RandomStream(10))
    np.testing.assert_array_equal(a.probs, b.probs)
    assert not np.array_equal(a.probs, c.probs)


def test_random_instantiation_respects_support():
    pred = Predictor.constant(5000, (0.0, 0.4, 0.6))
    out = random_instantiation(pred, RandomStream(1))
    assert np.all(out.probs[:, 0] == 0)


# serialization


@pytest.mark.parametrize(
    "rule",
    [
        ita_rule([0.2, 0.8]),
        ThresholdRule(2, 4),
        loss_min_rule(L01),
        hard_threshold_rule(1, 0.7, 3),
    ],
)
def test_rule_from_dict_round_trip(rule):
    back = rule_from_dict(rule.to_dict())
    assert type(back) is type(rule)
    pts = simplex_lattice(rule.k, 8)
    np.testing.assert_array_equal(back.accept(pts), rule.accept(pts))


def test_custom_rule_serializes_as_table():
    sq = CustomRule(lambda y: y[..., 0] ** 2, 2, "square")
    back = rule_from_dict(sq.to_dict())
    assert isinstance(back, TableRule)
    pts = simplex_lattice(2, 10)
    np.testing.assert_allclose(back.accept(pts), sq.accept(pts), atol=1e-12)


def test_table_rule_requires_full_lattice():
    full = table_rule(ita_rule([0, 1]), 4)
    vals = dict(full.values)
    vals.popitem()
    with pytest.raises(ValidationError):
        TableRule(2, 4, vals)


def test_unknown_rule_kind():
    with pytest.raises(ValidationError):
        rule_from_dict({"kind": "oracle"})


def test_custom_rule_range_is_checked():
    with pytest.raises(ValidationError):
        CustomRule(lambda y: 2 * y[..., 0], 2)([1.0, 0.0])
