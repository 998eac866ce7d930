import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calibra.core import (
    Discretization,
    GroupCollection,
    LossFunction,
    Nature,
    Population,
    Predictor,
    RandomStream,
    TypeSpace,
    ValidationError,
)
from calibra.fixtures import pop4, random_instance
from calibra.learn import (
    BudgetExhausted,
    LearnerConfig,
    LinearLoss,
    audit,
    canonical_partition,
    expectation_pipeline,
    expectation_target,
    learn_multiaccurate,
    learn_multicalibrated,
    learn_oi_loss_family,
    learn_scalar_calibrated,
    loss_weighted_pipeline,
    loss_weighted_target,
    omnipredict,
)
from calibra.metrics import class_from_groups, loss_gap, ma_error, mad_error, mc_cw_error, mc_full_error
from calibra.rules import compose, ita_rule, loss_min_rule, random_instantiation

P = pop4()
POP, N0, HALF, L01, C = P.pop, P.nature, P.predictor, P.loss, P.groups
SWAP = Nature.from_labels([1, 1, 0, 0], 2).as_predictor()
X = GroupCollection.full_domain(4)


# configuration


def test_config_defaults():
    cfg = LearnerConfig(0.1)
    assert cfg.step_size == 0.05
    assert cfg.budget(2) == int(np.ceil(64 * np.log(3) / 0.01))
    assert cfg.step_rule == "fixed"
    assert LearnerConfig(0.1, lam=0.25, mode="scalar-mc").step_rule == "residual"


@pytest.mark.parametrize(
    "kwargs",
    [
        {"alpha": 0.0},
        {"alpha": 1.0},
        {"alpha": 0.1, "mode": "boost"},
        {"alpha": 0.1, "eta": -1.0},
        {"alpha": 0.1, "max_iter": 0},
        {"alpha": 0.1, "mode": "mc-cw"},
        {"alpha": 0.1, "lam": 0.3},
        {"alpha": 0.1, "step": "newton"},
        {"alpha": 0.1, "lam": 0.25, "mode": "mc-full", "sample_size": 100},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValidationError):
        LearnerConfig(**kwargs)


# audit


def test_audit_finds_worst_constraint():
    v = audit(POP, N0, HALF, C, LearnerConfig(0.1))
    assert (v.constraint.group, v.constraint.index, v.gap) == ("{0,1}", 0, pytest.approx(0.25))
    assert audit(POP, N0, HALF, C, LearnerConfig(0.3)) is None


def test_threshold_audit_needs_ordered_types():
    with pytest.raises(ValidationError):
        audit(POP, N0, HALF, C, LearnerConfig(0.1, mode="ma-threshold"), TypeSpace(2))


# multi-accuracy


def test_learn_ma_separates_groups():
    pred, trace = learn_multiaccurate(POP, N0, C, LearnerConfig(0.1), initial=HALF)
    assert trace.success and trace.final_gap <= 0.1
    assert ma_error(POP, N0, pred, C).max_gap <= 0.1
    assert pred.probs[0, 0] > 0.8 and pred.probs[3, 1] > 0.8


def test_learn_ma_full_domain_keeps_mean():
    pred, trace = learn_multiaccurate(POP, N0, X, LearnerConfig(0.1), initial=HALF)
    assert trace.iterations == 0
    np.testing.assert_allclose(pred.probs, HALF.probs)


def test_learn_ma_threshold():
    types = TypeSpace(2, ordered=True)
    pred, trace = learn_multiaccurate(POP, N0, C, LearnerConfig(0.1, mode="ma-threshold"), types, initial=SWAP)
    assert trace.success
    assert ma_error(POP, N0, pred, C, mode="threshold", types=types).max_gap <= 0.1


def test_wrong_mode_for_learner():
    with pytest.raises(ValidationError):
        learn_multiaccurate(POP, N0, C, LearnerConfig(0.1, lam=0.25, mode="mc-cw"))
    with pytest.raises(ValidationError):
        learn_multicalibrated(POP, N0, C, LearnerConfig(0.1))


# multi-calibration


@pytest.mark.parametrize("mode,error", [("mc-cw", mc_cw_error), ("mc-full", mc_full_error)])
def test_learn_mc_from_swapped_start(mode, error):
    cfg = LearnerConfig(0.1, lam=0.25, mode=mode)
    pred, trace = learn_multicalibrated(POP, N0, C, cfg, initial=SWAP)
    assert trace.success and trace.iterations > 0
    assert error(POP, N0, pred, C, Discretization(0.25)).max_gap <= 0.1 + 1e-12


@pytest.mark.parametrize("mode", ["ma-cw", "mc-cw", "mc-full"])
def test_learning_from_nature_takes_no_steps(mode):
    cfg = LearnerConfig(0.1, lam=0.25, mode=mode)
    learn = learn_multiaccurate if mode == "ma-cw" else learn_multicalibrated
    pred, trace = learn(POP, N0, C, cfg, initial=N0.as_predictor())
    assert trace.iterations == 0 and trace.final_gap == 0.0
    np.testing.assert_array_equal(pred.probs, N0.probs)


def test_budget_exhausted_carries_state():
    cfg = LearnerConfig(0.01, lam=0.25, mode="mc-full", max_iter=2)
    with pytest.raises(BudgetExhausted) as info:
        learn_multicalibrated(POP, N0, C, cfg, initial=SWAP)
    err = info.value
    assert err.trace.iterations == 2 and not err.trace.success
    assert err.trace.final_gap > 0.01
    assert err.predictor.size == 4


def test_trace_is_deterministic():
    inst = random_instance(RandomStream(4, "trace"), 60, 3, 4)
    cfg = LearnerConfig(0.05, lam=0.25, mode="mc-cw")
    a, ta = learn_multicalibrated(inst.pop, inst.nature, inst.groups, cfg, initial=inst.predictor)
    b, tb = learn_multicalibrated(inst.pop, inst.nature, inst.groups, cfg, initial=inst.predictor)
    np.testing.assert_array_equal(a.probs, b.probs)
    assert [r.to_dict() for r in ta.records] == [r.to_dict() for r in tb.records]
    assert ta.to_dict() == tb.to_dict()
    first = audit(inst.pop, inst.nature, inst.predictor, inst.groups, cfg)
    if ta.records:
        assert ta.records[0].constraint == first.constraint
        assert all(abs(r.gap) > cfg.alpha for r in ta.records)


@given(st.integers(0, 2**31), st.sampled_from(["ma-cw", "mc-cw", "mc-full"]), st.integers(2, 3))
@settings(max_examples=15, deadline=None)
def test_learners_meet_their_audit(seed, mode, k):
    inst = random_instance(RandomStream(seed, "learn"), 30, k, 3)
    cfg = LearnerConfig(0.1, lam=0.25, mode=mode)
    learn = learn_multiaccurate if mode == "ma-cw" else learn_multicalibrated
    pred, trace = learn(inst.pop, inst.nature, inst.groups, cfg, initial=inst.predictor)
    assert trace.success and trace.iterations <= cfg.budget(k)
    assert audit(inst.pop, inst.nature, pred, inst.groups, cfg) is None


# scalar calibration and targets


def test_expectation_target():
    types = TypeSpace.grid(0.5)
    nat = Nature(np.array([[0.5, 0.5], [1.0, 0.0]]))
    np.testing.assert_allclose(expectation_target(nat, types), [0.5, 0.25])
    with pytest.raises(ValidationError):
        expectation_target(nat, TypeSpace(2))


def test_loss_weighted_target_marks_accept_side():
    np.testing.assert_allclose(loss_weighted_target(N0, L01), [0.0, 0.0, 1.0, 1.0])
    half = loss_weighted_target(Nature(HALF.probs), L01)
    np.testing.assert_allclose(half, 0.5)


def test_scalar_constant_target():
    q, trace = learn_scalar_calibrated(POP, np.full(4, 0.3), X, LearnerConfig(0.1, lam=0.1))
    assert trace.iterations <= 1
    np.testing.assert_allclose(q, 0.3, atol=1e-12)


def test_scalar_target_range_checked():
    with pytest.raises(ValidationError):
        learn_scalar_calibrated(POP, np.full(4, 1.3), X, LearnerConfig(0.1, lam=0.1))


def test_expectation_pipeline_on_fixture():
    types = TypeSpace.grid(0.5)
    loss = LinearLoss(at_zero=(0.0, 1.0), at_one=(1.0, 0.0))
    res = expectation_pipeline(POP, N0, types, loss, C, LearnerConfig(0.05, lam=0.25))
    np.testing.assert_array_equal(res.action.acceptance, [0, 0, 1, 1])
    assert res.gap <= res.bound + 1e-12
    assert res.bound == pytest.approx(6 * (res.alpha + 0.25))


def test_loss_weighted_pipeline_on_fixture():
    res = loss_weighted_pipeline(POP, N0, L01, C, LearnerConfig(0.05, lam=0.25))
    np.testing.assert_array_equal(res.action.acceptance, [0, 0, 1, 1])
    assert res.gap <= res.bound + 1e-12
    assert res.bound == pytest.approx(2 * res.alpha)


def test_linear_loss_validation_and_table():
    with pytest.raises(ValidationError):
        LinearLoss((0.0, 1.5), (0.0, 0.0))
    tab = LinearLoss((0.0, 1.0), (1.0, 0.0)).table(TypeSpace.grid(0.5)).table
    np.testing.assert_allclose(tab, [[0.25, 0.75], [0.75, 0.25]])


# omniprediction


def test_canonical_partition_single_cell():
    cp = canonical_partition(POP, N0, HALF, Discretization(0.5))
    assert cp.cells.tolist() == [[0.75, 0.75]]
    np.testing.assert_allclose(cp.canonical, [[0.5, 0.5]])
    np.testing.assert_allclose(cp.predictor().probs, HALF.probs)


def test_canonical_partition_of_nature_is_nature():
    cp = canonical_partition(POP, N0, N0.as_predictor(), Discretization(0.25))
    np.testing.assert_allclose(cp.predictor().probs, N0.probs)
    assert cp.mass.sum() == pytest.approx(1.0)


def test_omnipredict_on_fixture():
    res = omnipredict(POP, N0, HALF, L01, X, Discretization(0.5))
    assert res.alpha == pytest.approx(0.0, abs=1e-12)
    assert res.bound == pytest.approx(3.0)
    assert loss_gap(POP, N0, res.action, L01, class_from_groups(X)) == pytest.approx(0.0, abs=1e-12)


# outcome indistinguishability


def test_oi_loss_family_example():
    asym = LossFunction(np.array([[0.0, 1.0], [0.9, 0.0]]))
    H = class_from_groups(C)
    pred, trace = learn_oi_loss_family(POP, N0, H, [L01, asym], 0.05, LearnerConfig(0.1))
    assert trace.success
    for loss in (L01, asym):
        assert loss_gap(POP, N0, compose(loss_min_rule(loss), pred), loss, H) <= 0.05 + 1e-12


def test_oi_validation():
    with pytest.raises(ValidationError):
        learn_oi_loss_family(POP, N0, [], [L01], 0.05, LearnerConfig(0.1))
    with pytest.raises(ValidationError):
        learn_oi_loss_family(POP, N0, class_from_groups(C), [L01], 1.5, LearnerConfig(0.1))


# random instantiation of an ITA rule keeps its expected decision


def test_random_instantiation_mad_average():
    gen = RandomStream(8, "inst").generator
    size = 400
    pred = Predictor(gen.dirichlet(np.ones(3), size=size))
    nature = Nature(gen.dirichlet(np.ones(3), size=size))
    pop = Population.uniform(size)
    groups = GroupCollection.from_masks({"X": np.ones(size, dtype=bool), "half": np.arange(size) < 200})
    rule = ita_rule([0.1, 0.6, 0.9])
    base = mad_error(pop, nature, pred, rule, groups)
    draws = [
        mad_error(pop, nature, random_instantiation(pred, RandomStream(s, "draw")), rule, groups) for s in range(50)
    ]
    for c in base.constraints:
        avg = np.mean([d.gap_of(c) for d in draws])
        # Per draw the group mean has sd at most 0.5/sqrt(200); the average shrinks it by sqrt(50).
        assert abs(avg - base.gap_of(c)) <= 0.02
